#pragma once

// Linear phone classifier on frozen encoder outputs. One encoder checkpoint
// serves both operating points: offline (one chunk per utterance) and
// streaming (fixed chunks, no look-ahead).

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "chunkssl/cada.hpp"
#include "chunkssl/encoder.hpp"
#include "chunkssl/params.hpp"
#include "chunkssl/pretrain.hpp"
#include "chunkssl/random.hpp"

namespace chunkssl {

/// Encoder outputs of the valid frames. chunk == 0 runs offline.
template <class T>
Array<T> encode_frames(const EncoderConfig& cfg, const ParamSet<T>& params, const Array<T>& stacked,
                       std::size_t chunk) {
  const std::size_t n = stacked.rows();
  const ChunkLayout l = ChunkLayout::make(n, chunk == 0 ? n : std::min(chunk, n), false);
  Tape<T> tape(false);
  Bound<T> p(tape, params, false);
  return take_rows(encoder_forward(cfg, p, stacked, l, {}).output.value(), 0, n);
}

struct ProbeConfig {
  double chunk_ms = 320;
  double frame_ms = 40;
  long steps = 200;
  double lr = 1e-2;
  double train_fraction = 0.75;
  std::size_t phones = 8;

  std::size_t chunk_frames() const {
    if (!(chunk_ms > 0)) throw ConfigError("probe: chunk_ms must be positive");
    return static_cast<std::size_t>(std::max(1.0, std::round(chunk_ms / frame_ms)));
  }
};

struct ProbeResult {
  double offline_accuracy = 0;
  double streaming_accuracy = 0;
  std::size_t train_utterances = 0;
  std::size_t eval_utterances = 0;
  std::size_t eval_frames = 0;
};

template <class T>
struct ProbeFeatures {
  std::vector<Array<T>> offline, streaming;
  std::vector<std::vector<int>> labels;
};

template <class T>
ProbeFeatures<T> probe_features(const EncoderConfig& cfg, const ParamSet<T>& params,
                                const std::vector<Example<T>>& data, std::size_t chunk) {
  ProbeFeatures<T> f;
  for (const auto& ex : data) {
    f.offline.push_back(encode_frames(cfg, params, ex.stacked, 0));
    f.streaming.push_back(encode_frames(cfg, params, ex.stacked, chunk));
    f.labels.push_back(ex.labels);
  }
  return f;
}

template <class T>
double probe_accuracy(const ParamSet<T>& head, const std::vector<Array<T>>& feats,
                      const std::vector<std::vector<int>>& labels, std::size_t begin, std::size_t end,
                      std::size_t* frames = nullptr) {
  const Array<T>& w = head.at("probe.w");
  const Array<T>& b = head.at("probe.b");
  double hit = 0, total = 0;
  for (std::size_t u = begin; u < end; ++u) {
    const Array<T>& x = feats[u];
    for (std::size_t i = 0; i < x.rows(); ++i) {
      std::size_t best = 0;
      T best_score = -INFINITY;
      for (std::size_t k = 0; k < w.cols(); ++k) {
        T s = b[k];
        for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j) * w(j, k);
        if (s > best_score) best_score = s, best = k;
      }
      hit += static_cast<int>(best) == labels[u][i] ? 1.0 : 0.0;
      total += 1;
    }
  }
  if (frames) *frames = static_cast<std::size_t>(total);
  return total > 0 ? hit / total : 0.0;
}

/// Trains the head on the first train_fraction of utterances, alternating
/// offline and streaming features per step, then scores the rest in both
/// modes.
template <class T>
std::pair<ParamSet<T>, ProbeResult> train_probe(const ProbeFeatures<T>& f, std::size_t dim, const ProbeConfig& pc,
                                                std::uint64_t seed) {
  const std::size_t n = f.labels.size();
  if (n < 2) throw UsageError("probe: need at least two utterances");
  const std::size_t n_train = std::clamp<std::size_t>(static_cast<std::size_t>(pc.train_fraction * n), 1, n - 1);
  for (const auto& l : f.labels)
    for (int p : l)
      if (p < 0 || static_cast<std::size_t>(p) >= pc.phones) throw FormatError("probe: phone label out of range");

  Rng rng = substream(seed, "probe");
  ParamSet<T> head;
  head.add("probe.w", random_normal<T>(dim, pc.phones, rng, 0.01));
  head.add("probe.b", Array<T>(1, pc.phones));
  Adam<T> opt;
  std::uniform_int_distribution<std::size_t> pick(0, n_train - 1);
  for (long s = 1; s <= pc.steps; ++s) {
    const std::size_t u = pick(rng);
    const Array<T>& x = (s % 2 == 0) ? f.offline[u] : f.streaming[u];
    std::vector<std::size_t> targets(f.labels[u].begin(), f.labels[u].end());
    Tape<T> tape(true);
    Bound<T> p(tape, head, true);
    Var<T> logits = add_row(matmul(tape.constant(x), p["probe.w"]), p["probe.b"]);
    Var<T> loss = scale(cross_entropy(logits, targets), T(1) / static_cast<T>(targets.size()));
    tape.backward(loss);
    opt.step(head, p.gradients(head), pc.lr);
  }
  ProbeResult r;
  r.train_utterances = n_train;
  r.eval_utterances = n - n_train;
  r.offline_accuracy = probe_accuracy(head, f.offline, f.labels, n_train, n, &r.eval_frames);
  r.streaming_accuracy = probe_accuracy(head, f.streaming, f.labels, n_train, n);
  return {std::move(head), r};
}

}  // namespace chunkssl
