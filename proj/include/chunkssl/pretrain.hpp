#pragma once

// Chunkwise masked-prediction pretraining on copy-and-append sequences.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "chunkssl/cada.hpp"
#include "chunkssl/corpus.hpp"
#include "chunkssl/encoder.hpp"
#include "chunkssl/fsq.hpp"
#include "chunkssl/ops.hpp"
#include "chunkssl/params.hpp"
#include "chunkssl/random.hpp"

namespace chunkssl {

// ---------------------------------------------------------------------------
// Dynamic chunk sizes

enum class ScheduleMode { pretrain, finetune };

struct ChunkSchedule {
  ScheduleMode mode = ScheduleMode::pretrain;
  std::vector<double> durations_ms{640, 1280, 1920, 2560, 3200, 3840};
  double frame_ms = 40.0;

  static ChunkSchedule pretraining() { return {}; }
  static ChunkSchedule finetuning() {
    return {ScheduleMode::finetune, {160, 320, 640, 960, 1280, 1600}, 40.0};
  }

  void validate() const {
    if (durations_ms.empty()) throw ConfigError("chunk schedule: no durations");
    if (!(frame_ms > 0)) throw ConfigError("chunk schedule: frame period must be positive");
    for (double d : durations_ms) {
      const double f = d / frame_ms;
      if (!(d > 0) || std::abs(f - std::round(f)) > 1e-9) {
        throw ConfigError("chunk schedule: " + std::to_string(d) + " ms is not a whole number of " +
                          std::to_string(frame_ms) + " ms frames");
      }
    }
  }
};

struct ChunkDraw {
  std::size_t frames = 0;  // 0 means offline: the whole utterance is one chunk
  double ms = 0;
  bool offline() const { return frames == 0; }
  std::size_t chunk_for(std::size_t n) const { return offline() ? n : frames; }
};

/// Uniform draw from the schedule. In finetune mode even steps are offline
/// and odd steps streaming.
inline ChunkDraw sample_chunk_frames(const ChunkSchedule& s, Rng& rng, std::size_t step = 0) {
  s.validate();
  if (s.mode == ScheduleMode::finetune && step % 2 == 0) return {};
  std::uniform_int_distribution<std::size_t> pick(0, s.durations_ms.size() - 1);
  const double ms = s.durations_ms[pick(rng)];
  return {static_cast<std::size_t>(std::llround(ms / s.frame_ms)), ms};
}

// ---------------------------------------------------------------------------
// Masking

/// One span of floor(C/2) frames per extended chunk, starting at a
/// chunk-local offset drawn from {0..floor(C/4)}. Padding frames are dropped.
inline std::vector<std::size_t> select_mask_spans(const ChunkLayout& l, Rng& rng) {
  std::vector<std::size_t> masked;
  const std::size_t c = l.chunk, span = c / 2;
  std::uniform_int_distribution<std::size_t> offset(0, c / 4);
  for (std::size_t k = 0; k < l.extended_chunks(); ++k) {
    const std::size_t s = offset(rng);
    for (std::size_t t = s; t < s + span; ++t) {
      const std::size_t i = l.ext_begin(k) + t;
      if (!l.is_padding(i)) masked.push_back(i);
    }
  }
  return masked;
}

/// Replaces the listed rows by the (1 x d) mask embedding.
template <class T>
Array<T> apply_mask(const Array<T>& x, const std::vector<std::size_t>& masked, const Array<T>& embedding) {
  if (embedding.rows() != 1 || embedding.cols() != x.cols()) throw UsageError("apply_mask: embedding must be 1 x d");
  Array<T> out = x;
  for (auto i : masked) {
    if (i >= x.rows()) throw UsageError("apply_mask: row out of range");
    std::copy(embedding.data().begin(), embedding.data().end(), out.row_span(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
struct GroupLoss {
  Var<T> loss;                // summed over masked frames and channels
  std::vector<Var<T>> logits;  // per channel, |M| x K_r
};

/// Per-channel cross-entropy against sub-codebook embeddings. Only
/// |M| x K_r logits are live at a time.
template <class T>
GroupLoss<T> group_masked_loss(Var<T> outputs, const std::vector<std::size_t>& masked,
                               const std::vector<FsqCode>& targets, const std::vector<Var<T>>& embeddings,
                               const FsqConfig& fsq) {
  if (targets.size() != masked.size()) throw UsageError("group_masked_loss: one code per masked frame required");
  if (embeddings.size() != fsq.channels()) throw UsageError("group_masked_loss: one embedding table per channel");
  if (masked.empty()) throw UsageError("group_masked_loss: no masked frames");
  std::vector<long> rows(masked.begin(), masked.end());
  Var<T> o = gather_rows(outputs, rows);
  GroupLoss<T> out;
  for (std::size_t r = 0; r < fsq.channels(); ++r) {
    if (embeddings[r].rows() != static_cast<std::size_t>(fsq.levels[r])) {
      throw ConfigError("group_masked_loss: channel " + std::to_string(r) + " table has wrong row count");
    }
    std::vector<std::size_t> digits(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto& h = targets[i];
      if (h.size() != fsq.channels() || h[r] < fsq.lo(r) || h[r] > fsq.hi(r)) {
        throw UsageError("group_masked_loss: code of masked frame " + std::to_string(masked[i]) +
                         " out of range on channel " + std::to_string(r));
      }
      digits[i] = static_cast<std::size_t>(h[r] - fsq.lo(r));
    }
    Var<T> logits = matmul_nt(o, embeddings[r]);
    out.logits.push_back(logits);
    Var<T> ce = cross_entropy(logits, digits);
    out.loss = r == 0 ? ce : add(out.loss, ce);
  }
  return out;
}

/// Flat-vocabulary cross-entropy; test scale only.
template <class T>
Var<T> full_masked_loss(Var<T> outputs, const std::vector<std::size_t>& masked, const std::vector<std::uint64_t>& indices,
                        Var<T> embeddings) {
  if (embeddings.rows() > kFullCodebookLimit) {
    throw CapabilityError("full_masked_loss: vocabulary of " + std::to_string(embeddings.rows()) +
                          " exceeds the " + std::to_string(kFullCodebookLimit) + " limit; use the group loss");
  }
  if (indices.size() != masked.size()) throw UsageError("full_masked_loss: one index per masked frame required");
  if (masked.empty()) throw UsageError("full_masked_loss: no masked frames");
  std::vector<long> rows(masked.begin(), masked.end());
  std::vector<std::size_t> targets(indices.begin(), indices.end());
  return cross_entropy(matmul_nt(gather_rows(outputs, rows), embeddings), targets);
}

// ---------------------------------------------------------------------------
// Data preparation

/// One utterance ready for the encoder: stacked globally normalised frames,
/// FSQ codes from the unmasked original features, and phone labels at each
/// 40 ms token centre.
template <class T>
struct Example {
  std::string id;
  Array<T> stacked;
  std::vector<FsqCode> codes;
  std::vector<int> labels;
};

/// Per-dimension mean/std over every frame of the corpus.
inline std::pair<Array<double>, Array<double>> global_stats(const std::vector<Utterance>& corpus) {
  if (corpus.empty()) throw UsageError("global_stats: empty corpus");
  const std::size_t d = corpus.front().features.cols();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  double n = 0;
  for (const auto& u : corpus) {
    if (u.features.cols() != d) throw FormatError("global_stats: inconsistent feature dims");
    for (std::size_t i = 0; i < u.features.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double v = u.features(i, j);
        sum[j] += v;
        sq[j] += v * v;
      }
    n += static_cast<double>(u.features.rows());
  }
  Array<double> mean(1, d), sd(1, d);
  for (std::size_t j = 0; j < d; ++j) {
    mean[j] = sum[j] / n;
    sd[j] = std::sqrt(std::max(sq[j] / n - mean[j] * mean[j], 1e-8));
  }
  return {mean, sd};
}

/// Label of the 10 ms frame at the centre of stacked frame j.
inline std::vector<int> token_labels(const Utterance& u, std::size_t stack, std::size_t tokens) {
  const auto frames = u.frame_labels();
  std::vector<int> labels(tokens);
  for (std::size_t j = 0; j < tokens; ++j) labels[j] = frames[std::min(frames.size() - 1, j * stack + stack / 2)];
  return labels;
}

/// Tokens of one utterance: per-utterance normalisation, stacking, FSQ.
template <class T>
std::vector<FsqCode> tokenize(const FsqModelConfig& fcfg, const ParamSet<T>& fsq_params, const Array<float>& features,
                              std::size_t stack) {
  const auto norm = normalize_utterance(features.cast<T>());
  return fsq_encode(fcfg, fsq_params, stack_frames(norm.features, stack));
}

/// Encoder inputs and phone labels only; enough for probing.
template <class T>
std::vector<Example<T>> frontend_examples(const std::vector<Utterance>& corpus, const EncoderConfig& cfg,
                                          const ParamSet<T>& encoder_params) {
  std::vector<Example<T>> out;
  for (const auto& u : corpus) {
    Example<T> e;
    e.id = u.id;
    e.stacked = encoder_frontend(cfg, encoder_params, u.features.cast<T>());
    if (e.stacked.rows() == 0) continue;
    e.labels = token_labels(u, cfg.stack, e.stacked.rows());
    out.push_back(std::move(e));
  }
  return out;
}

template <class T>
std::vector<Example<T>> prepare_examples(const std::vector<Utterance>& corpus, const EncoderConfig& cfg,
                                         const ParamSet<T>& encoder_params, const FsqModelConfig& fcfg,
                                         const ParamSet<T>& fsq_params) {
  if (!(fcfg.fsq == cfg.fsq)) throw ConfigError("prepare_examples: FSQ levels differ between tokenizer and encoder");
  auto out = frontend_examples(corpus, cfg, encoder_params);
  std::size_t k = 0;
  for (const auto& u : corpus) {
    if (k < out.size() && out[k].id == u.id) out[k++].codes = tokenize(fcfg, fsq_params, u.features, cfg.stack);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

enum class LossKind { group, full };

struct PretrainConfig {
  ChunkSchedule schedule;
  double peak_lr = 3e-4;
  long total_steps = 500;
  double warmup_fraction = 0.01;
  std::size_t batch = 1;
  LossKind loss = LossKind::group;
};

struct StepResult {
  long step = 0;
  double loss = 0;  // summed over masked frames
  std::size_t masked_frames = 0;
  double chunk_ms = 0;
  double wall_ms = 0;
  std::vector<std::size_t> correct;  // per channel, argmax hits on masked frames
  bool updated = false;

  double loss_per_frame() const { return masked_frames ? loss / static_cast<double>(masked_frames) : 0.0; }
};

template <class T>
class Pretrainer {
 public:
  Pretrainer(EncoderConfig cfg, ParamSet<T> params, PretrainConfig pc, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        params_(std::move(params)),
        pc_(std::move(pc)),
        chunk_rng_(substream(seed, "chunk-sampling")),
        mask_rng_(substream(seed, "masking")),
        batch_rng_(substream(seed, "batching")) {
    pc_.schedule.validate();
    if (pc_.batch == 0) throw ConfigError("pretrain: batch must be >= 1");
    if (pc_.loss == LossKind::full && !params_.contains("emb.full")) {
      throw ConfigError("pretrain: full loss needs the full codebook table");
    }
  }

  const ParamSet<T>& params() const { return params_; }
  const EncoderConfig& config() const { return cfg_; }
  long steps() const { return step_; }

  double learning_rate(long step) const {
    const long warmup = std::max<long>(1, std::lround(pc_.warmup_fraction * static_cast<double>(pc_.total_steps)));
    return warmup_inverse_sqrt(step, pc_.peak_lr, warmup);
  }

  /// One update on `batch` utterances drawn from `data`.
  StepResult step(const std::vector<Example<T>>& data) {
    if (data.empty()) throw UsageError("pretrain: no training examples");
    const auto t0 = std::chrono::steady_clock::now();
    StepResult res;
    res.step = ++step_;
    const ChunkDraw draw = sample_chunk_frames(pc_.schedule, chunk_rng_, static_cast<std::size_t>(step_ - 1));
    res.chunk_ms = draw.ms;
    res.correct.assign(cfg_.fsq.channels(), 0);

    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::vector<const Example<T>*> batch;
    for (std::size_t b = 0; b < pc_.batch; ++b) batch.push_back(&data[pick(batch_rng_)]);

    struct Planned {
      const Example<T>* ex;
      ChunkLayout layout;
      std::vector<std::size_t> masked;
    };
    std::vector<Planned> plan;
    for (const auto* ex : batch) {
      const std::size_t n = ex->stacked.rows();
      ChunkLayout l = ChunkLayout::make(n, draw.chunk_for(n), true);
      auto masked = select_mask_spans(l, mask_rng_);
      res.masked_frames += masked.size();
      plan.push_back({ex, l, std::move(masked)});
    }

    if (res.masked_frames > 0) {
      Tape<T> tape(true);
      Bound<T> p(tape, params_, true);
      std::vector<Var<T>> emb;
      for (std::size_t r = 0; r < cfg_.fsq.channels(); ++r) emb.push_back(p["emb.r" + std::to_string(r)]);
      Var<T> total;
      bool first = true;
      for (const auto& pl : plan) {
        if (pl.masked.empty()) continue;
        auto fwd = encoder_forward(cfg_, p, pl.ex->stacked, pl.layout, pl.masked);
        std::vector<FsqCode> targets;
        for (auto i : pl.masked) targets.push_back(pl.ex->codes.at(pl.layout.original_position(i)));
        Var<T> loss;
        if (pc_.loss == LossKind::group) {
          auto g = group_masked_loss(fwd.output, pl.masked, targets, emb, cfg_.fsq);
          loss = g.loss;
          count_hits(g.logits, targets, res.correct);
        } else {
          std::vector<std::uint64_t> idx;
          for (const auto& h : targets) idx.push_back(code_to_index(h, cfg_.fsq));
          loss = full_masked_loss(fwd.output, pl.masked, idx, p["emb.full"]);
        }
        total = first ? loss : add(total, loss);
        first = false;
      }
      res.loss = static_cast<double>(total.value().item());
      Var<T> objective = scale(total, T(1) / static_cast<T>(res.masked_frames));
      tape.backward(objective);
      opt_.step(params_, p.gradients(params_), learning_rate(step_));
      res.updated = true;
    }
    res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }

 private:
  void count_hits(const std::vector<Var<T>>& logits, const std::vector<FsqCode>& targets,
                  std::vector<std::size_t>& correct) const {
    for (std::size_t r = 0; r < logits.size(); ++r) {
      const Array<T>& z = logits[r].value();
      for (std::size_t i = 0; i < z.rows(); ++i) {
        auto row = z.row_span(i);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == static_cast<std::size_t>(targets[i][r] - cfg_.fsq.lo(r))) ++correct[r];
      }
    }
  }

  EncoderConfig cfg_;
  ParamSet<T> params_;
  PretrainConfig pc_;
  Adam<T> opt_;
  Rng chunk_rng_, mask_rng_, batch_rng_;
  long step_ = 0;
};

inline std::string format_step(const StepResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%ld %.6f %.0f %zu %.1f", r.step, r.loss_per_frame(), r.chunk_ms, r.masked_frames,
                r.wall_ms);
  return buf;
}

/// Per-channel argmax accuracy of masked-frame predictions on held-out data,
/// with one fixed chunk size and a fixed masking seed.
template <class T>
std::vector<double> masked_accuracy(const EncoderConfig& cfg, const ParamSet<T>& params,
                                    const std::vector<Example<T>>& data, std::size_t chunk, std::uint64_t seed) {
  Rng rng = substream(seed, "eval-masking");
  std::vector<double> hits(cfg.fsq.channels(), 0.0);
  double total = 0;
  for (const auto& ex : data) {
    const ChunkLayout l = ChunkLayout::make(ex.stacked.rows(), std::min(chunk, ex.stacked.rows()), true);
    const auto masked = select_mask_spans(l, rng);
    if (masked.empty()) continue;
    Tape<T> tape(false);
    Bound<T> p(tape, params, false);
    auto fwd = encoder_forward(cfg, p, ex.stacked, l, masked);
    const Array<T>& o = fwd.output.value();
    for (std::size_t r = 0; r < cfg.fsq.channels(); ++r) {
      const Array<T>& e = params.at("emb.r" + std::to_string(r));
      for (auto i : masked) {
        const int target = ex.codes.at(l.original_position(i))[r] - cfg.fsq.lo(r);
        int best = 0;
        T best_score = -INFINITY;
        for (std::size_t k = 0; k < e.rows(); ++k) {
          T s = 0;
          for (std::size_t j = 0; j < o.cols(); ++j) s += o(i, j) * e(k, j);
          if (s > best_score) best_score = s, best = static_cast<int>(k);
        }
        if (best == target) hits[r] += 1;
      }
    }
    total += static_cast<double>(masked.size());
  }
  for (auto& h : hits) h = total > 0 ? h / total : 0.0;
  return hits;
}

}  // namespace chunkssl
