#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "chunkssl/cada.hpp"
#include "chunkssl/fsq.hpp"
#include "chunkssl/ops.hpp"
#include "chunkssl/params.hpp"
#include "chunkssl/random.hpp"

namespace chunkssl {

struct EncoderConfig {
  std::size_t input_dim = 80;
  std::size_t stack = 4;  // frames per encoder step; 10 ms -> 40 ms
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ff_dim = 256;
  std::size_t blocks = 2;
  bool conv = true;
  ConvSpec conv_spec{2, 2};
  long rel_window = 64;
  FsqConfig fsq{{5, 3}};
  bool full_codebook = false;  // also keep a flat V x d output table

  std::size_t stacked_dim() const { return input_dim * stack; }
};

inline constexpr std::uint64_t kFullCodebookLimit = 100000;

template <class T>
ParamSet<T> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.model_dim % cfg.heads != 0) throw ConfigError("encoder: model_dim must be divisible by heads");
  Rng rng = substream(seed, "encoder-init");
  const std::size_t d = cfg.model_dim, in = cfg.stacked_dim();
  auto w = [&](std::size_t r, std::size_t c, double gain = 1.0) {
    return random_normal<T>(r, c, rng, gain / std::sqrt(double(r)));
  };
  ParamSet<T> p;
  p.add("stat.mean", Array<T>(1, cfg.input_dim), true);
  p.add("stat.std", Array<T>(1, cfg.input_dim, T(1)), true);
  p.add("in.w", w(in, d));
  p.add("in.b", Array<T>(1, d));
  p.add("mask_emb", random_normal<T>(1, d, rng, 1.0));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string n = "b" + std::to_string(b) + ".";
    for (const char* ln : {"ln1", "ln2", "ln3"}) {
      p.add(n + ln + ".g", Array<T>(1, d, T(1)));
      p.add(n + ln + ".b", Array<T>(1, d));
    }
    p.add(n + "att.wq", w(d, d));
    p.add(n + "att.wk", w(d, d));
    p.add(n + "att.wv", w(d, d));
    p.add(n + "att.wo", w(d, d, 0.5));
    p.add(n + "att.rel", random_normal<T>(2 * cfg.rel_window + 1, d, rng, 0.1));
    if (cfg.conv) {
      p.add(n + "conv.pw1", w(d, 2 * d));
      p.add(n + "conv.pw1b", Array<T>(1, 2 * d));
      p.add(n + "conv.dw", random_normal<T>(cfg.conv_spec.width(), d, rng, 1.0 / std::sqrt(double(cfg.conv_spec.width()))));
      p.add(n + "conv.dwb", Array<T>(1, d));
      p.add(n + "conv.pw2", w(d, d, 0.5));
      p.add(n + "conv.pw2b", Array<T>(1, d));
    }
    p.add(n + "ff.w1", w(d, cfg.ff_dim));
    p.add(n + "ff.b1", Array<T>(1, cfg.ff_dim));
    p.add(n + "ff.w2", w(cfg.ff_dim, d, 0.5));
    p.add(n + "ff.b2", Array<T>(1, d));
  }
  p.add("out.ln.g", Array<T>(1, d, T(1)));
  p.add("out.ln.b", Array<T>(1, d));
  for (std::size_t r = 0; r < cfg.fsq.channels(); ++r) {
    p.add("emb.r" + std::to_string(r), random_normal<T>(cfg.fsq.levels[r], d, rng, 0.02));
  }
  if (cfg.full_codebook) {
    const auto v = cfg.fsq.vocab_size();
    if (v > kFullCodebookLimit) {
      throw CapabilityError("encoder: full codebook of " + std::to_string(v) + " rows exceeds the " +
                            std::to_string(kFullCodebookLimit) + " limit; use the group loss");
    }
    p.add("emb.full", random_normal<T>(v, d, rng, 0.02));
  }
  return p;
}

/// Applies the stored global mean/std and stacks frames: T x 80 -> N x 320.
template <class T>
Array<T> encoder_frontend(const EncoderConfig& cfg, const ParamSet<T>& params, const Array<T>& raw) {
  if (raw.cols() != cfg.input_dim) throw ConfigError("encoder: feature dim != input_dim");
  const Array<T>& mean = params.at("stat.mean");
  const Array<T>& sd = params.at("stat.std");
  Array<T> x = raw;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) = (x(i, j) - mean[j]) / sd[j];
  return stack_frames(x, cfg.stack);
}

// ---------------------------------------------------------------------------
// Block pieces shared by the parallel forward and the sequential oracle.

template <class T>
struct BlockView {
  const Bound<T>* p;
  std::string prefix;
  Var<T> operator()(const std::string& name) const { return (*p)[prefix + name]; }
};

template <class T>
AttentionParams<T> attention_params(const BlockView<T>& b, const EncoderConfig& cfg) {
  return {b("att.wq"), b("att.wk"), b("att.wv"), b("att.wo"), b("att.rel"), cfg.heads, cfg.rel_window};
}

template <class T>
Var<T> block_ln(const BlockView<T>& b, const char* which, Var<T> x) {
  return layer_norm(x, b(std::string(which) + ".g"), b(std::string(which) + ".b"));
}

/// Per-frame part of the convolution module before the depthwise conv:
/// layer norm, pointwise expansion to 2d and a gated linear unit.
template <class T>
Var<T> conv_module_input(const BlockView<T>& b, Var<T> x) {
  const std::size_t d = x.cols();
  Var<T> h = add_row(matmul(block_ln(b, "ln2", x), b("conv.pw1")), b("conv.pw1b"));
  return mul(slice_cols(h, 0, d), sigmoid(slice_cols(h, d, 2 * d)));
}

/// Per-frame part after the depthwise conv: bias, swish, pointwise projection.
template <class T>
Var<T> conv_module_output(const BlockView<T>& b, Var<T> convolved) {
  return add_row(matmul(swish(add_row(convolved, b("conv.dwb"))), b("conv.pw2")), b("conv.pw2b"));
}

template <class T>
Var<T> feed_forward_residual(const BlockView<T>& b, Var<T> x) {
  Var<T> h = swish(add_row(matmul(block_ln(b, "ln3", x), b("ff.w1")), b("ff.b1")));
  return add(x, add_row(matmul(h, b("ff.w2")), b("ff.b2")));
}

// ---------------------------------------------------------------------------

template <class T>
struct EncoderOutput {
  Var<T> output;                    // final layer-normed outputs, N' x d
  std::vector<Var<T>> block_outputs;  // residual stream after each block
  Var<T> embedded;                  // block-0 input after augmentation and masking
};

/// Single-pass forward over an (optionally augmented) sequence.
///
/// `stacked` holds the valid N_valid x (stack * input_dim) rows; rows up to
/// layout.frames are zero-padded. `masked` lists augmented indices whose
/// block-0 input is replaced by the learned mask embedding.
template <class T>
EncoderOutput<T> encoder_forward(const EncoderConfig& cfg, const Bound<T>& p, const Array<T>& stacked,
                                 const ChunkLayout& layout, const std::vector<std::size_t>& masked,
                                 MaskMode mode = default_mask_mode<T>()) {
  if (stacked.cols() != cfg.stacked_dim()) throw ConfigError("encoder_forward: input width != stacked_dim");
  if (stacked.rows() != layout.valid_frames) throw ConfigError("encoder_forward: layout does not match input length");
  Tape<T>& tape = p.tape();

  Array<T> padded(layout.frames, stacked.cols());
  std::copy(stacked.data().begin(), stacked.data().end(), padded.data().begin());
  Var<T> x = add_row(matmul(tape.constant(std::move(padded)), p["in.w"]), p["in.b"]);
  if (layout.extended && layout.extended_chunks() > 0) {
    x = gather_rows(x, original_positions(layout));
  }
  if (!masked.empty()) x = replace_rows(x, masked, p["mask_emb"]);

  EncoderOutput<T> out;
  out.embedded = x;
  auto mask = std::make_shared<const AttentionMask>(layout_mask(layout));
  for (std::size_t blk = 0; blk < cfg.blocks; ++blk) {
    BlockView<T> b{&p, "b" + std::to_string(blk) + "."};
    Var<T> a = block_ln(b, "ln1", x);
    x = add(x, cada_attention(a, layout, mask, attention_params(b, cfg), mode));
    if (cfg.conv) {
      Var<T> u = conv_module_input(b, x);
      x = add(x, conv_module_output(b, cada_depthwise_conv(u, b("conv.dw"), layout, cfg.conv_spec)));
    }
    x = feed_forward_residual(b, x);
    out.block_outputs.push_back(x);
  }
  out.output = layer_norm(x, p["out.ln.g"], p["out.ln.b"]);
  return out;
}

}  // namespace chunkssl
