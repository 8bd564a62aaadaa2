// chunkssl: data generation, tokenizer training, pretraining, probing and
// evaluation from the command line.
//
// Exit status: 0 ok, 1 usage/config, 2 data/format, 3 numeric failure. On
// failure one line "error<TAB>kind<TAB>message" goes to stderr.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "chunkssl/checkpoint.hpp"
#include "chunkssl/pipeline.hpp"

using namespace chunkssl;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string precision;
};

RunConfig resolve(const Globals& g) {
  RunConfig rc = g.config.empty() ? RunConfig{} : RunConfig::load(g.config);
  if (g.seed) rc.run.seed = *g.seed;
  if (g.threads) rc.run.threads = *g.threads;
  if (g.precision == "test") rc.run.precision = Precision::test;
  if (g.precision == "fast") rc.run.precision = Precision::fast;
  if (rc.run.threads == 0) throw ConfigError("--threads must be >= 1");
  rc.validate();
  return rc;
}

Manifest base_manifest(const std::string& command, const RunConfig& rc) {
  Manifest m;
  m.set("command", command);
  m.set("seed", rc.run.seed);
  m.set("precision", rc.run.precision == Precision::test ? "test" : "fast");
  m.set("config", rc.to_string());
  return m;
}

/// Architecture sections come from the config the checkpoint was trained
/// with; run settings come from the current invocation.
RunConfig embedded_config(const std::string& text, const RunConfig& current) {
  RunConfig rc = RunConfig::parse(text);
  rc.run = current.run;
  rc.probe = current.probe;
  rc.probe.phones = rc.data.phones;
  return rc;
}

std::string fmt(double v, int digits = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

template <class F>
auto with_precision(const RunConfig& rc, F&& f) {
  if (rc.run.precision == Precision::test) return f(double{});
  return f(float{});
}

// ---------------------------------------------------------------------------

void gen_data(const RunConfig& rc, const fs::path& out) {
  const auto corpus = generate_corpus(rc.data, rc.run.threads);
  write_corpus(out, corpus);
  std::size_t frames = 0;
  for (const auto& u : corpus) frames += u.features.rows();
  Manifest m = base_manifest("gen-data", rc);
  m.set("utterances", corpus.size());
  m.set("frames", frames);
  m.write(out / "manifest.tsv");
  std::cout << "utterances=" << corpus.size() << " frames=" << frames << '\n';
}

void fsq_train(const RunConfig& rc, const fs::path& data, const fs::path& out, const std::string& log_path) {
  const auto corpus = read_corpus(data);
  std::ostringstream log;
  with_precision(rc, [&](auto tag) {
    using T = decltype(tag);
    std::vector<double> losses;
    auto params = fit_fsq<T>(rc, corpus, [&](long s, double loss) {
      losses.push_back(loss);
      log << s << ' ' << fmt(loss) << '\n';
    });
    save_checkpoint(out, "fsq", rc.to_string(), params);
    Manifest m = base_manifest("fsq-train", rc);
    m.set("checkpoint", out.string());
    m.set("first_loss", fmt(losses.empty() ? 0.0 : losses.front()));
    m.set("final_loss", fmt(losses.empty() ? 0.0 : losses.back()));
    m.write(out.string() + ".manifest");
    std::cout << "steps=" << losses.size() << " first_loss=" << fmt(losses.empty() ? 0.0 : losses.front())
              << " final_loss=" << fmt(losses.empty() ? 0.0 : losses.back()) << '\n';
    return 0;
  });
  if (!log_path.empty()) atomic_write(log_path, log.str());
}

void fsq_encode_cmd(const RunConfig& current, const fs::path& data, const fs::path& model, const fs::path& out) {
  const auto corpus = read_corpus(data);
  with_precision(current, [&](auto tag) {
    using T = decltype(tag);
    auto ck = load_checkpoint<T>(model, "fsq");
    const RunConfig rc = embedded_config(ck.config, current);
    const auto fcfg = rc.fsq_config();
    std::vector<std::uint64_t> all;
    std::string index;
    for (const auto& u : corpus) {
      TokenFile tf;
      tf.fsq = fcfg.fsq;
      tf.frame_period_ms = u.frame_period_ms * static_cast<double>(rc.encoder.stack);
      for (const auto& c : tokenize(fcfg, ck.params, u.features, rc.encoder.stack))
        tf.indices.push_back(code_to_index(c, fcfg.fsq));
      all.insert(all.end(), tf.indices.begin(), tf.indices.end());
      std::ostringstream os;
      write_tokens(os, tf);
      atomic_write(out / (u.id + ".tok"), os.str());
      index += u.id + '\t' + u.id + ".tok\n";
    }
    atomic_write(out / "tokens.tsv", index);
    const auto h = token_histogram(all, fcfg.fsq);
    Manifest m = base_manifest("fsq-encode", rc);
    m.set("model", model.string());
    m.set("tokens", h.total);
    m.set("distinct", h.distinct());
    m.write(out / "manifest.tsv");
    std::cout << "tokens=" << h.total << " distinct=" << h.distinct() << " vocab=" << fcfg.fsq.vocab_size() << '\n';
    return 0;
  });
}

void pretrain_cmd(const RunConfig& rc, const fs::path& data, const fs::path& fsq_model, const fs::path& out,
                  const std::string& log_path, bool quiet) {
  const auto corpus = read_corpus(data);
  std::ostringstream log;
  with_precision(rc, [&](auto tag) {
    using T = decltype(tag);
    auto ck = load_checkpoint<T>(fsq_model, "fsq");
    const RunConfig tok = embedded_config(ck.config, rc);
    if (!(tok.fsq_config().fsq == rc.fsq_config().fsq) || tok.encoder.stack != rc.encoder.stack) {
      throw ConfigError("pretrain: FSQ checkpoint levels/stack differ from the configuration");
    }
    auto run = run_pretraining<T>(rc, corpus, ck.params, [&](const StepResult& r) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%ld %.6f %.0f %zu", r.step, r.loss_per_frame(), r.chunk_ms, r.masked_frames);
      log << buf << '\n';
      if (!quiet) std::cout << format_step(r) << '\n';
    });
    save_checkpoint(out, "encoder", rc.to_string(), run.params);
    const double first = smoothed_loss(run.log, std::min<std::size_t>(10, run.log.size()), 10);
    const double last = smoothed_loss(run.log, run.log.size(), 50);
    Manifest m = base_manifest("pretrain", rc);
    m.set("checkpoint", out.string());
    m.set("fsq_model", fsq_model.string());
    m.set("loss_step10", fmt(first));
    m.set("loss_final", fmt(last));
    m.write(out.string() + ".manifest");
    std::cout << "loss_step10=" << fmt(first) << " loss_final=" << fmt(last)
              << " reduction=" << fmt(first > 0 ? 1.0 - last / first : 0.0, 4) << '\n';
    return 0;
  });
  if (!log_path.empty()) atomic_write(log_path, log.str());
}

void probe_cmd(const RunConfig& current, const fs::path& data, const fs::path& encoder, std::optional<double> chunk_ms,
               const std::string& out) {
  const auto corpus = read_corpus(data);
  with_precision(current, [&](auto tag) {
    using T = decltype(tag);
    auto ck = load_checkpoint<T>(encoder, "encoder");
    RunConfig rc = embedded_config(ck.config, current);
    if (chunk_ms) rc.probe.chunk_ms = *chunk_ms;
    rc.validate();
    auto [head, r] = run_probe<T>(rc, corpus, ck.params, rc.run.seed);
    Manifest m = base_manifest("probe", rc);
    m.set("encoder", encoder.string());
    m.set("chunk_ms", rc.probe.chunk_ms);
    m.set("offline_accuracy", fmt(r.offline_accuracy));
    m.set("streaming_accuracy", fmt(r.streaming_accuracy));
    m.set("eval_frames", r.eval_frames);
    if (!out.empty()) {
      save_checkpoint(out, "probe", rc.to_string(), head);
      m.write(out + ".manifest");
    }
    std::cout << "offline_accuracy=" << fmt(r.offline_accuracy, 4) << " streaming_accuracy="
              << fmt(r.streaming_accuracy, 4) << " chunk_ms=" << rc.probe.chunk_ms << " eval_frames=" << r.eval_frames
              << '\n';
    return 0;
  });
}

void mask_dump(std::size_t frames, std::size_t chunk) {
  const AttentionMask m = cada_mask(frames, chunk);
  for (std::size_t i = 0; i < m.rows; ++i) {
    std::string row;
    for (std::size_t j = 0; j < m.cols; ++j) row += m(i, j) ? '1' : '0';
    std::cout << row << '\n';
  }
}

void eval_quality(const RunConfig& rc, const fs::path& tokens, const fs::path& data) {
  const auto corpus = read_corpus(data);
  JointCounts joint;
  for (const auto& u : corpus) {
    const fs::path p = tokens / (u.id + ".tok");
    std::istringstream is(read_file(p));
    TokenFile tf;
    try {
      tf = read_tokens(is);
    } catch (const FormatError& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
    joint.merge(align_tokens(tf.indices, tf.frame_period_ms, u));
  }
  const double purity = phone_purity(joint), mi = pnmi(joint);
  Manifest m = base_manifest("eval-quality", rc);
  m.set("tokens", tokens.string());
  m.set("purity", fmt(purity));
  m.set("pnmi", fmt(mi));
  m.write(tokens / "quality.tsv");
  std::cout << "purity=" << fmt(purity) << " pnmi=" << fmt(mi) << " pairs=" << joint.total() << '\n';
}

void eval_latency(const RunConfig& rc, const std::string& delays, const std::string& data,
                  const std::vector<double>& chunks, double lookahead_ms, const std::string& out) {
  std::string table = std::string(kLatencyHeader) + '\n';
  if (!delays.empty()) {
    std::istringstream is(read_file(delays));
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto r = parse_delay_record(line);
      table += format_latency_row(r.id, latency_scores(r.seq)) + '\n';
    }
  } else {
    const auto corpus = data.empty() ? generate_corpus(rc.data, rc.run.threads) : read_corpus(data);
    const double frame_ms = rc.data.frame_period_ms * static_cast<double>(rc.encoder.stack);
    for (double c : chunks) {
      LatencyScores mean;
      double n = 0;
      for (const auto& u : corpus) {
        const double x = static_cast<double>(u.features.rows()) * u.frame_period_ms;
        const auto seq = simulate_streaming_delays(x, c, lookahead_ms, phone_end_emissions(u, frame_ms), frame_ms);
        if (seq.delays.empty()) continue;
        const auto s = latency_scores(seq);
        mean.laal += s.laal, mean.al += s.al, mean.ap += s.ap, mean.dal += s.dal, mean.atd += s.atd;
        n += 1;
      }
      if (n == 0) throw FormatError("eval-latency: corpus produced no emissions");
      mean.laal /= n, mean.al /= n, mean.ap /= n, mean.dal /= n, mean.atd /= n;
      table += format_latency_row("chunk" + fmt(c, 0), mean) + '\n';
    }
  }
  std::cout << table;
  if (!out.empty()) {
    atomic_write(out, table);
    Manifest m = base_manifest("eval-latency", rc);
    m.set("source", delays.empty() ? "simulate" : delays);
    m.write(out + ".manifest");
  }
}

void footprint(const std::string& levels, std::uint64_t dim, std::uint64_t bytes) {
  const auto f = sub_codebook_footprint(FsqConfig::parse(levels), dim, bytes);
  std::cout << "V=" << f.vocab << " full=" << f.full_bytes << "B grouped=" << f.grouped_bytes << "B\n";
}

int fail(const char* kind, int code, const std::string& msg) {
  std::string flat = msg;
  for (auto& ch : flat)
    if (ch == '\n' || ch == '\t') ch = ' ';
  std::cerr << "error\t" << kind << '\t' << flat << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chunkssl: chunkwise self-supervised speech pretraining at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "run configuration file (INI)");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--threads", g.threads, "worker threads for data generation");
  app.add_option("--precision", g.precision, "test = float64 with exact masking, fast = float32")
      ->check(CLI::IsMember({"test", "fast"}));

  std::string out, data, model, log, tokens, delays, levels = "5x6,3x4";
  std::optional<double> chunk_ms;
  std::size_t frames = 6, chunk = 2;
  std::uint64_t dim = 512, bytes = 4;
  std::vector<double> chunks{160, 320, 640, 960, 1280, 1600, 1920, 2240};
  double lookahead = 0;
  bool quiet = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic phone corpus");
  gen->add_option("--out", out, "output directory")->required();

  auto* ftrain = app.add_subcommand("fsq-train", "train the FSQ tokenizer");
  ftrain->add_option("--data", data, "corpus directory")->required();
  ftrain->add_option("--out", out, "checkpoint path")->required();
  ftrain->add_option("--log", log, "per-step loss log");

  auto* fenc = app.add_subcommand("fsq-encode", "tokenize a corpus");
  fenc->add_option("--data", data, "corpus directory")->required();
  fenc->add_option("--model", model, "FSQ checkpoint")->required();
  fenc->add_option("--out", out, "token directory")->required();

  auto* pre = app.add_subcommand("pretrain", "chunkwise masked-prediction pretraining");
  pre->add_option("--data", data, "corpus directory")->required();
  pre->add_option("--fsq", model, "FSQ checkpoint")->required();
  pre->add_option("--out", out, "encoder checkpoint path")->required();
  pre->add_option("--log", log, "per-step log");
  pre->add_flag("--quiet", quiet, "no per-step output");

  auto* probe = app.add_subcommand("probe", "linear phone probe, offline and streaming");
  probe->add_option("--data", data, "corpus directory")->required();
  probe->add_option("--encoder", model, "encoder checkpoint")->required();
  probe->add_option("--chunk-ms", chunk_ms, "streaming chunk duration");
  probe->add_option("--out", out, "probe head checkpoint path");

  auto* mask = app.add_subcommand("mask-dump", "print the copy-and-append attention mask");
  mask->add_option("--frames", frames, "valid frames")->check(CLI::PositiveNumber);
  mask->add_option("--chunk", chunk, "chunk size in frames")->check(CLI::PositiveNumber);

  auto* quality = app.add_subcommand("eval-quality", "phone purity and PNMI of a token directory");
  quality->add_option("--tokens", tokens, "token directory")->required();
  quality->add_option("--data", data, "corpus directory")->required();

  auto* latency = app.add_subcommand("eval-latency", "latency scores of delay records or a streaming simulation");
  auto* from_file = latency->add_option("--delays", delays, "delay record file");
  latency->add_option("--data", data, "corpus for --simulate (generated from the config if absent)")
      ->excludes(from_file);
  latency->add_option("--chunks", chunks, "chunk durations in ms for the simulation")->delimiter(',');
  latency->add_option("--lookahead-ms", lookahead, "simulated look-ahead");
  latency->add_option("--out", out, "write the table here");

  auto* foot = app.add_subcommand("footprint", "embedding table sizes for a level set");
  foot->add_option("--levels", levels, "levels, e.g. 5x6,3x4");
  foot->add_option("--dim", dim, "embedding dimension");
  foot->add_option("--bytes", bytes, "bytes per value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    return fail("usage", 1, e.what());
  }

  try {
    const RunConfig rc = resolve(g);
    if (*gen) gen_data(rc, out);
    if (*ftrain) fsq_train(rc, data, out, log);
    if (*fenc) fsq_encode_cmd(rc, data, model, out);
    if (*pre) pretrain_cmd(rc, data, model, out, log, quiet);
    if (*probe) probe_cmd(rc, data, model, chunk_ms, out);
    if (*mask) mask_dump(frames, chunk);
    if (*quality) eval_quality(rc, tokens, data);
    if (*latency) eval_latency(rc, delays, data, chunks, lookahead, out);
    if (*foot) footprint(levels, dim, bytes);
  } catch (const UsageError& e) {
    return fail("usage", 1, e.what());
  } catch (const FormatError& e) {
    return fail("format", 2, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail("format", 2, e.what());
  } catch (const NumericError& e) {
    return fail("numeric", 3, e.what());
  }
  return 0;
}
