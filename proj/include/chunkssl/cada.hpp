#pragma once

// Copy-and-append augmentation: every base chunk except the last gets a copy
// of its successor appended to the end of the utterance (its "extended"
// chunk). One pass over the augmented sequence, with the matching attention
// mask and paired convolution windows, reproduces chunk-by-chunk processing.

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "chunkssl/array.hpp"
#include "chunkssl/error.hpp"
#include "chunkssl/ops.hpp"
#include "chunkssl/tape.hpp"

namespace chunkssl {

inline std::size_t chunk_index(std::size_t frame, std::size_t chunk) {
  if (chunk == 0) throw UsageError("chunk_index: chunk size must be >= 1");
  return frame / chunk;
}

/// Frame/chunk bookkeeping for one utterance. `frames` is already padded to a
/// multiple of `chunk`; `valid_frames` counts the real (unpadded) frames.
/// Without extension the layout describes plain chunked streaming inference.
struct ChunkLayout {
  std::size_t frames = 0;
  std::size_t chunk = 1;
  std::size_t valid_frames = 0;
  bool extended = true;

  /// Pads `valid` up to the next multiple of `chunk`.
  static ChunkLayout make(std::size_t valid, std::size_t chunk, bool extended = true) {
    if (valid == 0) throw UsageError("chunk layout: empty utterance");
    if (chunk == 0) throw UsageError("chunk layout: chunk size must be >= 1");
    ChunkLayout l;
    l.chunk = chunk;
    l.valid_frames = valid;
    l.frames = (valid + chunk - 1) / chunk * chunk;
    l.extended = extended;
    return l;
  }

  std::size_t chunks() const { return frames / chunk; }
  std::size_t extended_chunks() const { return extended ? chunks() - 1 : 0; }
  std::size_t augmented_length() const { return frames + extended_chunks() * chunk; }

  bool is_extended(std::size_t i) const { return i >= frames; }
  bool is_padding(std::size_t i) const { return original_position(i) >= valid_frames; }

  /// Position of the base frame that augmented frame i holds (or copies).
  std::size_t original_position(std::size_t i) const { return i < frames ? i : i - frames + chunk; }

  /// Base chunk k's extended chunk occupies [ext_begin(k), ext_begin(k) + C).
  std::size_t ext_begin(std::size_t k) const { return frames + k * chunk; }
};

inline std::vector<long> original_positions(const ChunkLayout& l) {
  std::vector<long> pos(l.augmented_length());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<long>(l.original_position(i));
  return pos;
}

template <class T>
struct AugmentedBatch {
  ChunkLayout layout;
  Array<T> features;              // N' x D
  std::vector<long> orig_pos;     // N'
  std::vector<bool> is_extended;  // N'
  AttentionMask mask;             // N' x N'
  std::vector<std::size_t> masked;  // augmented indices, extended frames only
  std::vector<std::size_t> padding;  // augmented indices of zero-padded frames
};

/// Attention mask built from chunk membership: a base frame in chunk a sees
/// base chunks 0..a plus its own extended chunk E_a (when it exists); a frame
/// of E_k sees base chunks 0..k plus E_k. Without extension, base frames see
/// chunks 0..a.
inline AttentionMask layout_mask(const ChunkLayout& l) {
  const std::size_t n = l.augmented_length(), c = l.chunk, m = l.chunks();
  AttentionMask mask(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t own = l.is_extended(i) ? (i - l.frames) / c : i / c;
    for (std::size_t j = 0; j <= own && j < m; ++j)
      for (std::size_t f = j * c; f < (j + 1) * c; ++f) mask.set(i, f, true);
    if (own < l.extended_chunks()) {
      for (std::size_t f = l.ext_begin(own); f < l.ext_begin(own) + c; ++f) mask.set(i, f, true);
    }
  }
  return mask;
}

/// The CADA masking matrix for N base frames (a multiple of C).
inline AttentionMask cada_mask(std::size_t frames, std::size_t chunk) {
  if (chunk == 0 || frames == 0 || frames % chunk != 0) {
    throw UsageError("cada_mask: frame count " + std::to_string(frames) + " is not a positive multiple of chunk " +
                     std::to_string(chunk));
  }
  return layout_mask(ChunkLayout::make(frames, chunk, true));
}

/// Copies chunks B_1..B_{M-1} to the end of the sequence. Inputs shorter
/// than a multiple of C are zero-padded first. No frames are masked yet.
template <class T>
AugmentedBatch<T> build_augmented(const Array<T>& features, std::size_t chunk) {
  if (features.rows() == 0) throw UsageError("build_augmented: empty input");
  AugmentedBatch<T> b;
  b.layout = ChunkLayout::make(features.rows(), chunk, true);
  const auto& l = b.layout;
  const std::size_t n2 = l.augmented_length(), d = features.cols();
  b.features = Array<T>(n2, d);
  b.orig_pos = original_positions(l);
  b.is_extended.resize(n2);
  for (std::size_t i = 0; i < n2; ++i) {
    b.is_extended[i] = l.is_extended(i);
    const std::size_t src = l.original_position(i);
    if (src < features.rows()) {
      auto row = features.row_span(src);
      std::copy(row.begin(), row.end(), b.features.row_span(i).begin());
    } else {
      b.padding.push_back(i);
    }
  }
  b.mask = layout_mask(l);
  return b;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
  std::size_t left = 0;   // L_lc
  std::size_t right = 0;  // L_rc
  std::size_t width() const { return left + 1 + right; }
};

/// One concatenated subsequence of the paired convolution: rows to gather
/// from the augmented sequence (-1 for zero padding) and the augmented
/// positions its outputs belong to.
struct ConvWindow {
  std::vector<long> source;
  std::vector<std::size_t> outputs;
};

/// Pairs (B_k, E_k) for k < M-1 and B_{M-1} alone (every chunk alone without
/// extension). Each gets the last L_lc base frames before B_k as left
/// context (zeros before the utterance start) and L_rc zero frames on the
/// right.
inline std::vector<ConvWindow> conv_windows(const ChunkLayout& l, const ConvSpec& spec) {
  if (l.chunk < 1) throw UsageError("conv_windows: chunk size must be >= 1");
  std::vector<ConvWindow> windows;
  const std::size_t c = l.chunk;
  for (std::size_t k = 0; k < l.chunks(); ++k) {
    ConvWindow w;
    const long start = static_cast<long>(k * c);
    for (long f = start - static_cast<long>(spec.left); f < start; ++f) w.source.push_back(f < 0 ? -1 : f);
    for (std::size_t f = k * c; f < (k + 1) * c; ++f) {
      w.source.push_back(static_cast<long>(f));
      w.outputs.push_back(f);
    }
    if (k < l.extended_chunks()) {
      for (std::size_t f = l.ext_begin(k); f < l.ext_begin(k) + c; ++f) {
        w.source.push_back(static_cast<long>(f));
        w.outputs.push_back(f);
      }
    }
    w.source.insert(w.source.end(), spec.right, -1);
    windows.push_back(std::move(w));
  }
  return windows;
}

/// Paired depthwise convolution over an augmented sequence: gather each
/// window, run valid-mode convolution, scatter outputs back in place.
template <class T>
Var<T> cada_depthwise_conv(Var<T> x, Var<T> kernel, const ChunkLayout& layout, const ConvSpec& spec) {
  if (kernel.rows() != spec.width()) {
    throw ConfigError("cada_depthwise_conv: kernel width " + std::to_string(kernel.rows()) + " != " +
                      std::to_string(spec.width()));
  }
  if (x.rows() != layout.augmented_length()) {
    throw ConfigError("cada_depthwise_conv: input has " + std::to_string(x.rows()) + " rows, layout expects " +
                      std::to_string(layout.augmented_length()));
  }
  const auto windows = conv_windows(layout, spec);
  std::vector<Var<T>> pieces;
  std::vector<long> placement(layout.augmented_length(), -1);
  long row = 0;
  for (const auto& w : windows) {
    pieces.push_back(depthwise_conv1d(gather_rows(x, w.source), kernel));
    for (auto pos : w.outputs) placement[pos] = row++;
  }
  return gather_rows(concat_rows(pieces), placement);
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head self-attention weights. `rel` holds one d-dim key embedding per
/// clipped relative distance in [-window, window].
template <class T>
struct AttentionParams {
  Var<T> wq, wk, wv, wo, rel;
  std::size_t heads = 1;
  long window = 64;
};

/// Attention of `queries` over `keys` (both already normalised inputs).
/// Logits are beta * q_i . (k_j + r_{clip(p_j - p_i)}) per head with
/// beta = 1/sqrt(head dim); a null mask means full access.
template <class T>
Var<T> attention(Var<T> queries, Var<T> keys, const std::vector<long>& query_pos, const std::vector<long>& key_pos,
                 std::shared_ptr<const AttentionMask> mask, const AttentionParams<T>& p,
                 MaskMode mode = default_mask_mode<T>()) {
  const std::size_t d = p.wq.cols();
  if (p.heads == 0 || d % p.heads != 0) throw ConfigError("attention: model dim not divisible by heads");
  if (query_pos.size() != queries.rows() || key_pos.size() != keys.rows()) {
    throw ConfigError("attention: position list does not match row count");
  }
  const std::size_t dh = d / p.heads;
  const T beta = T(1) / std::sqrt(T(dh));
  Var<T> q = matmul(queries, p.wq);
  Var<T> k = matmul(keys, p.wk);
  Var<T> v = matmul(keys, p.wv);
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    Var<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
    Var<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
    Var<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
    Var<T> rh = slice_cols(p.rel, h * dh, (h + 1) * dh);
    Var<T> content = matmul_nt(qh, kh);
    Var<T> position = relative_gather(matmul_nt(qh, rh), query_pos, key_pos, p.window);
    Var<T> weights = masked_softmax(scale(add(content, position), beta), mask, mode);
    heads.push_back(matmul(weights, vh));
  }
  return matmul(p.heads == 1 ? heads.front() : concat_cols(heads), p.wo);
}

/// Self-attention over an augmented sequence with its CADA mask; relative
/// distances come from original positions.
template <class T>
Var<T> cada_attention(Var<T> x, const ChunkLayout& layout, std::shared_ptr<const AttentionMask> mask,
                      const AttentionParams<T>& p, MaskMode mode = default_mask_mode<T>()) {
  const auto pos = original_positions(layout);
  return attention(x, x, pos, pos, std::move(mask), p, mode);
}

}  // namespace chunkssl
