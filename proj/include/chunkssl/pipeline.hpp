#pragma once

// End-to-end steps shared by the command-line tool and the acceptance run:
// FSQ fitting, encoder initialisation from corpus statistics, pretraining
// and probing.

#include <functional>
#include <string>
#include <vector>

#include "chunkssl/config.hpp"
#include "chunkssl/corpus.hpp"
#include "chunkssl/fsq.hpp"
#include "chunkssl/metrics.hpp"
#include "chunkssl/pretrain.hpp"
#include "chunkssl/probe.hpp"

namespace chunkssl {

/// Per-utterance normalised, stacked FSQ inputs.
template <class T>
std::vector<Array<T>> fsq_inputs(const std::vector<Utterance>& corpus, std::size_t stack) {
  std::vector<Array<T>> out;
  for (const auto& u : corpus) {
    if (u.features.rows() < 2) continue;
    Array<T> s = stack_frames(normalize_utterance(u.features.cast<T>()).features, stack);
    if (s.rows() > 0) out.push_back(std::move(s));
  }
  return out;
}

template <class T>
ParamSet<T> fit_fsq(const RunConfig& rc, const std::vector<Utterance>& corpus,
                    const std::function<void(long, double)>& log = {}) {
  const auto fcfg = rc.fsq_config();
  ParamSet<T> params = init_fsq_model<T>(fcfg, rc.run.seed);
  FsqTrainConfig tc{rc.fsq.steps, rc.fsq.lr, rc.fsq.gamma, rc.fsq.batch_frames};
  train_fsq(fcfg, params, fsq_inputs<T>(corpus, rc.encoder.stack), tc, rc.run.seed, log);
  return params;
}

/// Fresh encoder whose frozen input statistics come from `corpus`.
template <class T>
ParamSet<T> init_encoder_for(const RunConfig& rc, const std::vector<Utterance>& corpus) {
  const auto cfg = rc.encoder_config();
  ParamSet<T> p = init_encoder<T>(cfg, rc.run.seed);
  auto [mean, sd] = global_stats(corpus);
  if (mean.cols() != cfg.input_dim) throw FormatError("corpus feature dim does not match configuration");
  p.at("stat.mean") = mean.cast<T>();
  p.at("stat.std") = sd.cast<T>();
  return p;
}

template <class T>
struct PretrainRun {
  ParamSet<T> params;
  std::vector<StepResult> log;
};

template <class T>
PretrainRun<T> run_pretraining(const RunConfig& rc, const std::vector<Utterance>& corpus,
                               const ParamSet<T>& fsq_params,
                               const std::function<void(const StepResult&)>& on_step = {}) {
  const auto cfg = rc.encoder_config();
  ParamSet<T> init = init_encoder_for<T>(rc, corpus);
  auto data = prepare_examples(corpus, cfg, init, rc.fsq_config(), fsq_params);
  Pretrainer<T> trainer(cfg, std::move(init), rc.pretrain_config(), rc.run.seed);
  PretrainRun<T> run;
  for (long s = 0; s < rc.pretrain.steps; ++s) {
    run.log.push_back(trainer.step(data));
    if (on_step) on_step(run.log.back());
  }
  run.params = trainer.params();
  return run;
}

/// Trailing mean of per-masked-frame loss over `window` steps ending at
/// `step` (1-based); steps without masked frames are skipped.
inline double smoothed_loss(const std::vector<StepResult>& log, std::size_t step, std::size_t window) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = step > window ? step - window : 0; i < step && i < log.size(); ++i) {
    if (log[i].masked_frames == 0) continue;
    sum += log[i].loss_per_frame();
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

template <class T>
std::pair<ParamSet<T>, ProbeResult> run_probe(const RunConfig& rc, const std::vector<Utterance>& corpus,
                                              const ParamSet<T>& encoder_params, std::uint64_t seed) {
  const auto cfg = rc.encoder_config();
  const auto pc = rc.probe_config();
  auto data = frontend_examples(corpus, cfg, encoder_params);
  auto feats = probe_features(cfg, encoder_params, data, pc.chunk_frames());
  return train_probe(feats, cfg.model_dim, pc, seed);
}

/// Token j of a stacked stream is labelled with the phone at its centre.
inline JointCounts align_tokens(const std::vector<std::uint64_t>& tokens, double token_ms, const Utterance& u) {
  const auto frames = u.frame_labels();
  JointCounts j;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const double centre = (static_cast<double>(t) + 0.5) * token_ms;
    const auto f = static_cast<std::size_t>(centre / u.frame_period_ms);
    if (f >= frames.size()) break;
    j.add(tokens[t], frames[f]);
  }
  return j;
}

/// One emission at the last 40 ms frame of every phone segment.
inline std::vector<bool> phone_end_emissions(const Utterance& u, double frame_ms) {
  const auto n = static_cast<std::size_t>(static_cast<double>(u.features.rows()) * u.frame_period_ms / frame_ms);
  std::vector<bool> e(n, false);
  for (const auto& s : u.alignment) {
    const auto f = static_cast<std::size_t>(std::ceil(s.end_ms / frame_ms)) - 1;
    if (n > 0) e[std::min(f, n - 1)] = true;
  }
  return e;
}

}  // namespace chunkssl
