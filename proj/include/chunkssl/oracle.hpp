#pragma once

// Naive chunk-by-chunk evaluation used as the reference for the single-pass
// CADA forward. Step k runs every block on the pair (B_k, masked E_k)
// against cached block inputs of B_0..B_{k-1}; the pair attends to all of it
// with no mask. The last base chunk runs alone. Finalised B_k rows enter the
// cache. No CADA mask or convolution plan is used here.

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "chunkssl/cada.hpp"
#include "chunkssl/encoder.hpp"
#include "chunkssl/ops.hpp"
#include "chunkssl/params.hpp"

namespace chunkssl {

template <class T>
struct OracleOutput {
  Array<T> output;                    // N' x d in augmented order
  std::vector<Array<T>> block_outputs;  // per block, N' x d
};

template <class T>
OracleOutput<T> sequential_oracle(const EncoderConfig& cfg, const ParamSet<T>& params, const Array<T>& stacked,
                                  const ChunkLayout& layout, const std::vector<std::size_t>& masked,
                                  MaskMode mode = default_mask_mode<T>()) {
  if (stacked.cols() != cfg.stacked_dim()) throw UsageError("sequential_oracle: input width != stacked_dim");
  if (stacked.rows() != layout.valid_frames) throw UsageError("sequential_oracle: layout does not match input length");
  for (auto m : masked) {
    if (m >= layout.augmented_length()) throw UsageError("sequential_oracle: masked index out of range");
  }
  const std::size_t c = layout.chunk, d = cfg.model_dim, n2 = layout.augmented_length();
  const std::size_t left = cfg.conv_spec.left, right = cfg.conv_spec.right;

  Array<T> padded(layout.frames, stacked.cols());
  std::copy(stacked.data().begin(), stacked.data().end(), padded.data().begin());

  OracleOutput<T> result;
  result.output = Array<T>(n2, d);
  result.block_outputs.assign(cfg.blocks, Array<T>(n2, d));

  // Per block: residual-stream inputs and conv-module inputs of finalised base frames.
  std::vector<Array<T>> stream_cache(cfg.blocks, Array<T>(0, d));
  std::vector<Array<T>> conv_cache(cfg.blocks, Array<T>(0, d));
  auto append_rows = [d](Array<T>& cache, const Array<T>& rows, std::size_t count) {
    std::vector<T> data = cache.data();
    data.insert(data.end(), rows.data().begin(), rows.data().begin() + count * d);
    cache = Array<T>({cache.rows() + count, d}, std::move(data));
  };

  for (std::size_t k = 0; k < layout.chunks(); ++k) {
    const bool paired = k < layout.extended_chunks();
    Tape<T> tape(false);
    Bound<T> p(tape, params, false);

    // Augmented positions and original positions of the rows in this step.
    std::vector<std::size_t> slots;
    std::vector<long> qpos;
    for (std::size_t t = 0; t < c; ++t) {
      slots.push_back(k * c + t);
      qpos.push_back(static_cast<long>(k * c + t));
    }
    if (paired) {
      for (std::size_t t = 0; t < c; ++t) {
        slots.push_back(layout.ext_begin(k) + t);
        qpos.push_back(static_cast<long>((k + 1) * c + t));
      }
    }
    std::vector<long> kpos;
    for (std::size_t f = 0; f < k * c; ++f) kpos.push_back(static_cast<long>(f));
    kpos.insert(kpos.end(), qpos.begin(), qpos.end());

    Array<T> step_input(slots.size(), padded.cols());
    for (std::size_t r = 0; r < slots.size(); ++r) {
      auto src = padded.row_span(static_cast<std::size_t>(qpos[r]));
      std::copy(src.begin(), src.end(), step_input.row_span(r).begin());
    }
    Var<T> x = add_row(matmul(tape.constant(std::move(step_input)), p["in.w"]), p["in.b"]);
    std::vector<std::size_t> local_masked;
    for (std::size_t r = 0; r < slots.size(); ++r) {
      if (std::find(masked.begin(), masked.end(), slots[r]) != masked.end()) local_masked.push_back(r);
    }
    if (!local_masked.empty()) x = replace_rows(x, local_masked, p["mask_emb"]);

    for (std::size_t blk = 0; blk < cfg.blocks; ++blk) {
      BlockView<T> b{&p, "b" + std::to_string(blk) + "."};
      const Array<T> block_input = x.value();

      Var<T> context = k > 0 ? concat_rows<T>({tape.constant(stream_cache[blk]), x}) : x;
      Var<T> keys = block_ln(b, "ln1", context);
      Var<T> queries = block_ln(b, "ln1", x);
      x = add(x, attention(queries, keys, qpos, kpos, nullptr, attention_params(b, cfg), mode));

      Array<T> conv_input;
      if (cfg.conv) {
        Var<T> u = conv_module_input(b, x);
        conv_input = u.value();
        Array<T> lc(left, d);
        for (std::size_t t = 0; t < left; ++t) {
          const long f = static_cast<long>(k * c) - static_cast<long>(left) + static_cast<long>(t);
          if (f < 0) continue;
          auto src = conv_cache[blk].row_span(static_cast<std::size_t>(f));
          std::copy(src.begin(), src.end(), lc.row_span(t).begin());
        }
        std::vector<Var<T>> window;
        if (left > 0) window.push_back(tape.constant(std::move(lc)));
        window.push_back(u);
        if (right > 0) window.push_back(tape.constant(Array<T>(right, d)));
        Var<T> convolved = depthwise_conv1d(concat_rows(window), b("conv.dw"));
        x = add(x, conv_module_output(b, convolved));
      }
      x = feed_forward_residual(b, x);

      append_rows(stream_cache[blk], block_input, c);
      if (cfg.conv) append_rows(conv_cache[blk], conv_input, c);
      for (std::size_t r = 0; r < slots.size(); ++r) {
        auto src = x.value().row_span(r);
        std::copy(src.begin(), src.end(), result.block_outputs[blk].row_span(slots[r]).begin());
      }
    }

    Var<T> y = layer_norm(x, p["out.ln.g"], p["out.ln.b"]);
    for (std::size_t r = 0; r < slots.size(); ++r) {
      auto src = y.value().row_span(r);
      std::copy(src.begin(), src.end(), result.output.row_span(slots[r]).begin());
    }
  }
  return result;
}

}  // namespace chunkssl
