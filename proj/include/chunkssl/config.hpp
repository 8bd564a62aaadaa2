#pragma once

// Run configuration: "[section]" headers and "key = value" lines, '#'
// comments. Unknown sections or keys are rejected. to_string() renders the
// fully resolved configuration, which every artifact embeds.

#include <charconv>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "chunkssl/corpus.hpp"
#include "chunkssl/encoder.hpp"
#include "chunkssl/fsq.hpp"
#include "chunkssl/pretrain.hpp"
#include "chunkssl/probe.hpp"

namespace chunkssl {

enum class Precision { test, fast };

struct RunConfig {
  struct Run {
    std::uint64_t seed = 1;
    Precision precision = Precision::test;
    unsigned threads = 1;
  } run;
  SyntheticCorpusSpec data;
  struct Fsq {
    std::string levels = "5,3";
    std::size_t width = 64;
    std::size_t blocks = 2;
    double lr = 2e-4;
    double gamma = 1.0;  // per-step exponential decay
    long steps = 200;
    std::size_t batch_frames = 256;
  } fsq;
  struct Encoder {
    std::size_t model_dim = 64;
    std::size_t heads = 4;
    std::size_t ff_dim = 256;
    std::size_t blocks = 2;
    bool conv = true;
    std::size_t conv_left = 2;
    std::size_t conv_right = 2;
    long rel_window = 64;
    std::size_t stack = 4;
    bool full_codebook = false;
  } encoder;
  struct Pretrain {
    long steps = 500;
    double lr = 3e-4;
    double warmup_fraction = 0.01;
    std::size_t batch = 1;
    std::string durations_ms = "640,1280,1920,2560,3200,3840";
    std::string loss = "group";
  } pretrain;
  ProbeConfig probe;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const fs::path& path) {
    try {
      return parse(read_file(path));
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  }
  std::string to_string() const;

  void validate() const {
    data.validate();
    fsq_config();
    encoder_config();
    pretrain_config().schedule.validate();
    probe.chunk_frames();
    if (probe.phones != data.phones) throw ConfigError("config: probe.phones must equal data.phones");
  }

  FsqModelConfig fsq_config() const {
    FsqModelConfig c;
    try {
      c.fsq = FsqConfig::parse(fsq.levels);
    } catch (const UsageError& e) {
      throw ConfigError(e.what());
    }
    c.input_dim = data.dim * encoder.stack;
    c.width = fsq.width;
    c.blocks = fsq.blocks;
    return c;
  }

  EncoderConfig encoder_config() const {
    EncoderConfig c;
    c.input_dim = data.dim;
    c.stack = encoder.stack;
    c.model_dim = encoder.model_dim;
    c.heads = encoder.heads;
    c.ff_dim = encoder.ff_dim;
    c.blocks = encoder.blocks;
    c.conv = encoder.conv;
    c.conv_spec = {encoder.conv_left, encoder.conv_right};
    c.rel_window = encoder.rel_window;
    c.fsq = fsq_config().fsq;
    c.full_codebook = encoder.full_codebook;
    if (c.heads == 0 || c.model_dim % c.heads != 0) throw ConfigError("config: encoder.model_dim must divide by heads");
    if (c.stack == 0) throw ConfigError("config: encoder.stack must be >= 1");
    return c;
  }

  PretrainConfig pretrain_config() const {
    PretrainConfig c;
    c.schedule.durations_ms.clear();
    std::stringstream ss(pretrain.durations_ms);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        c.schedule.durations_ms.push_back(std::stod(item));
      } catch (const std::logic_error&) {
        throw ConfigError("config: bad duration '" + item + "'");
      }
    }
    c.schedule.frame_ms = data.frame_period_ms * static_cast<double>(encoder.stack);
    c.peak_lr = pretrain.lr;
    c.total_steps = pretrain.steps;
    c.warmup_fraction = pretrain.warmup_fraction;
    c.batch = pretrain.batch;
    if (pretrain.loss == "group") {
      c.loss = LossKind::group;
    } else if (pretrain.loss == "full") {
      c.loss = LossKind::full;
    } else {
      throw ConfigError("config: pretrain.loss must be group or full");
    }
    return c;
  }

  ProbeConfig probe_config() const {
    ProbeConfig c = probe;
    c.frame_ms = data.frame_period_ms * static_cast<double>(encoder.stack);
    return c;
  }
};

namespace detail {

struct Field {
  std::string section, key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

/// Shortest text that reads back to the same value.
template <class V>
std::string show(const V& v) {
  if constexpr (std::is_floating_point_v<V>) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
  } else {
    std::ostringstream os;
    os << v;
    return os.str();
  }
}

template <class V>
Field field(const char* section, const char* key, V& ref) {
  std::string name = std::string(section) + "." + key;
  return {section, key,
          [&ref, name](const std::string& text) {
            std::istringstream is(text);
            V v{};
            std::string rest;
            if constexpr (std::is_same_v<V, bool>) {
              if (text == "true" || text == "1") {
                v = true;
              } else if (text == "false" || text == "0") {
                v = false;
              } else {
                throw ConfigError("config: " + name + " expects true/false, got '" + text + "'");
              }
            } else if constexpr (std::is_same_v<V, std::string>) {
              v = text;
            } else {
              if (!(is >> v) || (is >> rest)) throw ConfigError("config: bad value for " + name + ": '" + text + "'");
              if constexpr (std::is_unsigned_v<V>) {
                if (text.find('-') != std::string::npos) throw ConfigError("config: " + name + " must be non-negative");
              }
            }
            ref = v;
          },
          [&ref] {
            if constexpr (std::is_same_v<V, bool>) {
              return std::string(ref ? "true" : "false");
            } else {
              return show(ref);
            }
          }};
}

inline std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  f.push_back(field("run", "seed", c.run.seed));
  f.push_back({"run", "precision",
               [&c](const std::string& v) {
                 if (v == "test") {
                   c.run.precision = Precision::test;
                 } else if (v == "fast") {
                   c.run.precision = Precision::fast;
                 } else {
                   throw ConfigError("config: run.precision must be test or fast");
                 }
               },
               [&c] { return std::string(c.run.precision == Precision::test ? "test" : "fast"); }});
  f.push_back(field("run", "threads", c.run.threads));

  f.push_back(field("data", "phones", c.data.phones));
  f.push_back(field("data", "dim", c.data.dim));
  f.push_back(field("data", "self_loop", c.data.self_loop));
  f.push_back(field("data", "next_bias", c.data.next_bias));
  f.push_back(field("data", "margin", c.data.margin));
  f.push_back(field("data", "mean_scale", c.data.mean_scale));
  f.push_back(field("data", "noise", c.data.noise));
  f.push_back(field("data", "utterances", c.data.utterances));
  f.push_back(field("data", "min_frames", c.data.min_frames));
  f.push_back(field("data", "max_frames", c.data.max_frames));
  f.push_back(field("data", "frame_period_ms", c.data.frame_period_ms));

  f.push_back(field("fsq", "levels", c.fsq.levels));
  f.push_back(field("fsq", "width", c.fsq.width));
  f.push_back(field("fsq", "blocks", c.fsq.blocks));
  f.push_back(field("fsq", "lr", c.fsq.lr));
  f.push_back(field("fsq", "gamma", c.fsq.gamma));
  f.push_back(field("fsq", "steps", c.fsq.steps));
  f.push_back(field("fsq", "batch_frames", c.fsq.batch_frames));

  f.push_back(field("encoder", "model_dim", c.encoder.model_dim));
  f.push_back(field("encoder", "heads", c.encoder.heads));
  f.push_back(field("encoder", "ff_dim", c.encoder.ff_dim));
  f.push_back(field("encoder", "blocks", c.encoder.blocks));
  f.push_back(field("encoder", "conv", c.encoder.conv));
  f.push_back(field("encoder", "conv_left", c.encoder.conv_left));
  f.push_back(field("encoder", "conv_right", c.encoder.conv_right));
  f.push_back(field("encoder", "rel_window", c.encoder.rel_window));
  f.push_back(field("encoder", "stack", c.encoder.stack));
  f.push_back(field("encoder", "full_codebook", c.encoder.full_codebook));

  f.push_back(field("pretrain", "steps", c.pretrain.steps));
  f.push_back(field("pretrain", "lr", c.pretrain.lr));
  f.push_back(field("pretrain", "warmup_fraction", c.pretrain.warmup_fraction));
  f.push_back(field("pretrain", "batch", c.pretrain.batch));
  f.push_back(field("pretrain", "durations_ms", c.pretrain.durations_ms));
  f.push_back(field("pretrain", "loss", c.pretrain.loss));

  f.push_back(field("probe", "chunk_ms", c.probe.chunk_ms));
  f.push_back(field("probe", "steps", c.probe.steps));
  f.push_back(field("probe", "lr", c.probe.lr));
  f.push_back(field("probe", "train_fraction", c.probe.train_fraction));
  f.push_back(field("probe", "phones", c.probe.phones));
  return f;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  auto table = detail::fields(c);
  std::istringstream is(text);
  std::string line, section;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(n) + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : table) known = known || f.section == section;
      if (!known) throw ConfigError("config line " + std::to_string(n) + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(n) + ": key outside any section");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    bool found = false;
    for (auto& f : table) {
      if (f.section == section && f.key == key) {
        f.set(value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("config line " + std::to_string(n) + ": unknown key " + section + "." + key);
  }
  c.validate();
  return c;
}

inline std::string RunConfig::to_string() const {
  RunConfig copy = *this;
  auto table = detail::fields(copy);
  std::string out, section;
  for (const auto& f : table) {
    if (f.section != section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace chunkssl
