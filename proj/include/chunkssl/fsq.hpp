#pragma once

// Finite scalar quantisation: each of d' channels is squashed with tanh,
// scaled to floor(K_r/2) and rounded to one of K_r integer levels. The flat
// token index is the mixed-radix number formed by the channel digits,
// channel 0 least significant.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "chunkssl/array.hpp"
#include "chunkssl/error.hpp"
#include "chunkssl/ops.hpp"
#include "chunkssl/params.hpp"
#include "chunkssl/random.hpp"
#include "chunkssl/tape.hpp"

namespace chunkssl {

struct FsqConfig {
  std::vector<int> levels;

  FsqConfig() = default;
  explicit FsqConfig(std::vector<int> lv) : levels(std::move(lv)) { validate(); }

  /// Accepts "5,5,3" or the grouped form "5x6,3x4" (six 5s, four 3s).
  static FsqConfig parse(const std::string& text) {
    std::vector<int> lv;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) throw UsageError("fsq levels: empty entry in '" + text + "'");
      const auto x = item.find('x');
      try {
        std::size_t used = 0;
        if (x == std::string::npos) {
          lv.push_back(std::stoi(item, &used));
          if (used != item.size()) throw std::invalid_argument(item);
        } else {
          const int k = std::stoi(item.substr(0, x), &used);
          if (used != x) throw std::invalid_argument(item);
          const std::string rep = item.substr(x + 1);
          const int n = std::stoi(rep, &used);
          if (used != rep.size() || n < 1) throw std::invalid_argument(item);
          lv.insert(lv.end(), static_cast<std::size_t>(n), k);
        }
      } catch (const std::logic_error&) {
        throw UsageError("fsq levels: cannot parse '" + item + "'");
      }
    }
    return FsqConfig(std::move(lv));
  }

  void validate() const {
    if (levels.empty()) throw UsageError("fsq levels: at least one channel required");
    for (int k : levels) {
      if (k < 2) throw UsageError("fsq levels: every channel needs >= 2 levels, got " + std::to_string(k));
    }
    (void)vocab_size();
  }

  std::size_t channels() const { return levels.size(); }

  /// Smallest/largest stored integer on channel r. Odd K: [-(K-1)/2, (K-1)/2].
  /// Even K: the half-integer grid -K/2+0.5 .. K/2-0.5, stored shifted up by
  /// one half, i.e. [-K/2+1, K/2].
  int lo(std::size_t r) const { return -((levels[r] - 1) / 2); }
  int hi(std::size_t r) const { return lo(r) + levels[r] - 1; }
  int half(std::size_t r) const { return levels[r] / 2; }
  double shift(std::size_t r) const { return levels[r] % 2 == 0 ? 0.5 : 0.0; }

  /// V = prod K_r, exact; overflow of 64 bits is a usage error.
  std::uint64_t vocab_size() const {
    std::uint64_t v = 1;
    for (int k : levels) {
      if (__builtin_mul_overflow(v, static_cast<std::uint64_t>(k), &v)) {
        throw UsageError("fsq levels: vocabulary size overflows 64 bits");
      }
    }
    return v;
  }

  std::uint64_t level_sum() const { return std::accumulate(levels.begin(), levels.end(), std::uint64_t{0}); }

  std::string to_string() const {
    std::string s;
    for (std::size_t r = 0; r < levels.size(); ++r) s += (r ? "," : "") + std::to_string(levels[r]);
    return s;
  }

  friend bool operator==(const FsqConfig&, const FsqConfig&) = default;
};

/// Stored integer per channel (see FsqConfig::lo/hi).
using FsqCode = std::vector<int>;

/// Bounded rounding of one encoder output vector.
inline FsqCode fsq_quantize(std::span<const double> z, const FsqConfig& cfg) {
  if (z.size() != cfg.channels()) throw ConfigError("fsq_quantize: expected " + std::to_string(cfg.channels()) + " channels");
  FsqCode h(z.size());
  for (std::size_t r = 0; r < z.size(); ++r) {
    const double y = cfg.half(r) * std::tanh(z[r]) + cfg.shift(r);
    h[r] = std::clamp(static_cast<int>(std::round(y)), cfg.lo(r), cfg.hi(r));
  }
  return h;
}

/// Real value a stored code represents (what the decoder sees).
inline double fsq_level_value(int stored, const FsqConfig& cfg, std::size_t r) { return stored - cfg.shift(r); }

inline std::uint64_t code_to_index(const FsqCode& code, const FsqConfig& cfg) {
  if (code.size() != cfg.channels()) throw UsageError("code_to_index: code has wrong channel count");
  std::uint64_t mu = 0, radix = 1;
  for (std::size_t r = 0; r < code.size(); ++r) {
    if (code[r] < cfg.lo(r) || code[r] > cfg.hi(r)) {
      throw UsageError("code_to_index: channel " + std::to_string(r) + " value " + std::to_string(code[r]) +
                       " outside [" + std::to_string(cfg.lo(r)) + ", " + std::to_string(cfg.hi(r)) + "]");
    }
    mu += static_cast<std::uint64_t>(code[r] - cfg.lo(r)) * radix;
    radix *= static_cast<std::uint64_t>(cfg.levels[r]);
  }
  return mu;
}

inline FsqCode index_to_code(std::uint64_t mu, const FsqConfig& cfg) {
  if (mu >= cfg.vocab_size()) {
    throw UsageError("index_to_code: index " + std::to_string(mu) + " >= vocabulary " +
                     std::to_string(cfg.vocab_size()));
  }
  FsqCode code(cfg.channels());
  for (std::size_t r = 0; r < code.size(); ++r) {
    const auto k = static_cast<std::uint64_t>(cfg.levels[r]);
    code[r] = static_cast<int>(mu % k) + cfg.lo(r);
    mu /= k;
  }
  return code;
}

/// Per-channel class ids in [0, K_r): the sub-codebook targets.
inline std::vector<std::size_t> code_digits(const FsqCode& code, const FsqConfig& cfg) {
  std::vector<std::size_t> d(code.size());
  for (std::size_t r = 0; r < code.size(); ++r) d[r] = static_cast<std::size_t>(code[r] - cfg.lo(r));
  return d;
}

struct Footprint {
  std::uint64_t vocab = 0;
  std::uint64_t grouped_rows = 0;
  std::uint64_t full_bytes = 0;
  std::uint64_t grouped_bytes = 0;
};

/// Output-embedding storage for the flat table (V rows) versus per-channel
/// sub-codebooks (sum K_r rows).
inline Footprint sub_codebook_footprint(const FsqConfig& cfg, std::uint64_t embed_dim, std::uint64_t bytes_per_value) {
  Footprint f;
  f.vocab = cfg.vocab_size();
  f.grouped_rows = cfg.level_sum();
  if (__builtin_mul_overflow(f.vocab, embed_dim * bytes_per_value, &f.full_bytes)) {
    throw UsageError("footprint: full table size overflows 64 bits");
  }
  f.grouped_bytes = f.grouped_rows * embed_dim * bytes_per_value;
  return f;
}

// ---------------------------------------------------------------------------
// Utterance normalisation

template <class T>
struct Normalized {
  Array<T> features;
  std::vector<double> mean;
  std::vector<double> variance;
  std::vector<std::size_t> floored;  // channels whose variance hit the floor
};

/// Per-channel mean/variance normalisation over one utterance (population
/// variance, floored at 1e-8).
template <class T>
Normalized<T> normalize_utterance(const Array<T>& x, double floor = 1e-8) {
  if (x.rows() < 2) throw UsageError("normalize_utterance: need at least 2 frames");
  Normalized<T> out;
  const std::size_t t = x.rows(), d = x.cols();
  out.mean.assign(d, 0.0);
  out.variance.assign(d, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += x(i, j);
  for (auto& m : out.mean) m /= static_cast<double>(t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) out.variance[j] += (x(i, j) - out.mean[j]) * (x(i, j) - out.mean[j]);
  for (std::size_t j = 0; j < d; ++j) {
    out.variance[j] /= static_cast<double>(t);
    if (out.variance[j] < floor) {
      out.variance[j] = floor;
      out.floored.push_back(j);
    }
  }
  out.features = Array<T>(t, d);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out.features(i, j) = static_cast<T>((x(i, j) - out.mean[j]) / std::sqrt(out.variance[j]));
  return out;
}

/// Concatenates `factor` consecutive frames into one row; a trailing partial
/// group is dropped.
template <class T>
Array<T> stack_frames(const Array<T>& x, std::size_t factor) {
  if (factor == 0) throw UsageError("stack_frames: factor must be >= 1");
  const std::size_t n = x.rows() / factor, d = x.cols();
  Array<T> out(n, d * factor);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < factor; ++s)
      for (std::size_t j = 0; j < d; ++j) out(i, s * d + j) = x(i * factor + s, j);
  return out;
}

// ---------------------------------------------------------------------------
// Encoder / decoder

struct FsqModelConfig {
  FsqConfig fsq{{5, 3}};
  std::size_t input_dim = 320;  // 4 stacked 80-dim frames
  std::size_t width = 64;
  std::size_t blocks = 2;
};

/// Which path the quantiser node takes.
enum class FsqPath {
  quantized,  // bounded round, straight-through gradient
  surrogate,  // tanh bound without rounding
  bypass,     // decoder sees the raw encoder output
};

namespace detail {

template <class T>
void add_residual_stack(ParamSet<T>& p, const std::string& prefix, std::size_t width, std::size_t blocks, Rng& rng) {
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string n = prefix + ".r" + std::to_string(b);
    p.add(n + ".ln.g", Array<T>(1, width, T(1)));
    p.add(n + ".ln.b", Array<T>(1, width));
    p.add(n + ".w1", random_normal<T>(width, width, rng, 1.0 / std::sqrt(double(width))));
    p.add(n + ".b1", Array<T>(1, width));
    p.add(n + ".w2", random_normal<T>(width, width, rng, 0.5 / std::sqrt(double(width))));
    p.add(n + ".b2", Array<T>(1, width));
  }
}

template <class T>
Var<T> residual_stack(const Bound<T>& p, const std::string& prefix, std::size_t blocks, Var<T> x) {
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string n = prefix + ".r" + std::to_string(b);
    Var<T> h = layer_norm(x, p[n + ".ln.g"], p[n + ".ln.b"]);
    h = swish(add_row(matmul(h, p[n + ".w1"]), p[n + ".b1"]));
    x = add(x, add_row(matmul(h, p[n + ".w2"]), p[n + ".b2"]));
  }
  return x;
}

}  // namespace detail

template <class T>
ParamSet<T> init_fsq_model(const FsqModelConfig& cfg, std::uint64_t seed) {
  Rng rng = substream(seed, "fsq-init");
  ParamSet<T> p;
  const std::size_t w = cfg.width, dz = cfg.fsq.channels(), in = cfg.input_dim;
  p.add("enc.in.w", random_normal<T>(in, w, rng, 1.0 / std::sqrt(double(in))));
  p.add("enc.in.b", Array<T>(1, w));
  detail::add_residual_stack(p, "enc", w, cfg.blocks, rng);
  p.add("enc.out.w", random_normal<T>(w, dz, rng, 1.0 / std::sqrt(double(w))));
  p.add("enc.out.b", Array<T>(1, dz));
  p.add("dec.in.w", random_normal<T>(dz, w, rng, 1.0 / std::sqrt(double(dz))));
  p.add("dec.in.b", Array<T>(1, w));
  detail::add_residual_stack(p, "dec", w, cfg.blocks, rng);
  p.add("dec.out.w", random_normal<T>(w, in, rng, 1.0 / std::sqrt(double(w))));
  p.add("dec.out.b", Array<T>(1, in));
  return p;
}

template <class T>
struct FsqForward {
  Var<T> latent;          // encoder output z
  Var<T> quantized;       // level values fed to the decoder
  Var<T> reconstruction;  // decoder output
};

template <class T>
FsqForward<T> fsq_forward(const FsqModelConfig& cfg, const Bound<T>& p, Var<T> x, FsqPath path = FsqPath::quantized) {
  Tape<T>& tape = p.tape();
  Var<T> h = add_row(matmul(x, p["enc.in.w"]), p["enc.in.b"]);
  h = detail::residual_stack(p, "enc", cfg.blocks, h);
  Var<T> z = add_row(matmul(h, p["enc.out.w"]), p["enc.out.b"]);

  Var<T> q = z;
  if (path != FsqPath::bypass) {
    const std::size_t dz = cfg.fsq.channels();
    Array<T> half(1, dz), shift(1, dz), unshift(1, dz);
    std::vector<T> lo(dz), hi(dz);
    for (std::size_t r = 0; r < dz; ++r) {
      half[r] = T(cfg.fsq.half(r));
      shift[r] = T(cfg.fsq.shift(r));
      unshift[r] = -shift[r];
      lo[r] = T(cfg.fsq.lo(r));
      hi[r] = T(cfg.fsq.hi(r));
    }
    Var<T> bounded = add_row(mul_row(tanh(z), tape.constant(half)), tape.constant(shift));
    q = add_row(round_ste(bounded, lo, hi, path == FsqPath::surrogate), tape.constant(unshift));
  }

  Var<T> g = add_row(matmul(q, p["dec.in.w"]), p["dec.in.b"]);
  g = detail::residual_stack(p, "dec", cfg.blocks, g);
  Var<T> recon = add_row(matmul(g, p["dec.out.w"]), p["dec.out.b"]);
  return {z, q, recon};
}

/// Reconstruction loss and gradients for one batch of stacked, normalised
/// frames. Does not update parameters.
template <class T>
std::pair<T, std::map<std::string, Array<T>>> fsq_train_step(const FsqModelConfig& cfg, const ParamSet<T>& params,
                                                             const Array<T>& batch,
                                                             FsqPath path = FsqPath::quantized) {
  if (batch.cols() != cfg.input_dim) throw ConfigError("fsq_train_step: batch width != input_dim");
  Tape<T> tape(true);
  Bound<T> bound(tape, params, true);
  Var<T> x = tape.constant(batch);
  auto fwd = fsq_forward(cfg, bound, x, path);
  Var<T> loss = mse(fwd.reconstruction, x);
  tape.backward(loss);
  return {loss.value().item(), bound.gradients(params)};
}

/// Codes for each row of a stacked, normalised utterance.
template <class T>
std::vector<FsqCode> fsq_encode(const FsqModelConfig& cfg, const ParamSet<T>& params, const Array<T>& stacked) {
  Tape<T> tape(false);
  Bound<T> bound(tape, params, false);
  auto fwd = fsq_forward(cfg, bound, tape.constant(stacked), FsqPath::bypass);
  const Array<T>& z = fwd.latent.value();
  std::vector<FsqCode> codes;
  std::vector<double> row(z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) row[j] = static_cast<double>(z(i, j));
    codes.push_back(fsq_quantize(row, cfg.fsq));
  }
  return codes;
}

struct FsqTrainConfig {
  long steps = 200;
  double lr = 2e-4;
  double gamma = 1.0;  // per-step exponential decay of lr
  std::size_t batch_frames = 256;
};

/// Adam on reconstruction MSE over random frame batches drawn from the pooled
/// rows of `utterances` (stacked, normalised). Returns the per-step loss.
template <class T>
std::vector<double> train_fsq(const FsqModelConfig& cfg, ParamSet<T>& params, const std::vector<Array<T>>& utterances,
                              const FsqTrainConfig& tc, std::uint64_t seed,
                              const std::function<void(long, double)>& log = {}) {
  std::size_t rows = 0;
  for (const auto& u : utterances) {
    if (u.cols() != cfg.input_dim) throw ConfigError("train_fsq: utterance width != input_dim");
    rows += u.rows();
  }
  if (rows == 0) throw UsageError("train_fsq: no frames");
  if (tc.batch_frames == 0) throw ConfigError("train_fsq: batch_frames must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> index;
  for (std::size_t u = 0; u < utterances.size(); ++u)
    for (std::size_t i = 0; i < utterances[u].rows(); ++i) index.emplace_back(u, i);

  Rng rng = substream(seed, "fsq-batches");
  std::uniform_int_distribution<std::size_t> pick(0, index.size() - 1);
  Adam<T> opt;
  std::vector<double> losses;
  Array<T> batch(std::min(tc.batch_frames, index.size()), cfg.input_dim);
  for (long s = 1; s <= tc.steps; ++s) {
    for (std::size_t b = 0; b < batch.rows(); ++b) {
      const auto [u, i] = index[pick(rng)];
      auto src = utterances[u].row_span(i);
      std::copy(src.begin(), src.end(), batch.row_span(b).begin());
    }
    auto [loss, grads] = fsq_train_step(cfg, params, batch);
    if (!std::isfinite(static_cast<double>(loss))) throw NumericError("train_fsq: non-finite loss at step " + std::to_string(s));
    opt.step(params, grads, exponential_decay(s, tc.lr, tc.gamma));
    losses.push_back(static_cast<double>(loss));
    if (log) log(s, static_cast<double>(loss));
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Codebook usage

struct TokenHistogram {
  std::map<std::uint64_t, std::uint64_t> counts;
  std::uint64_t total = 0;
  std::vector<std::vector<std::uint64_t>> channel_marginals;  // [r][digit]

  std::size_t distinct() const { return counts.size(); }
};

inline TokenHistogram token_histogram(std::span<const std::uint64_t> indices, const FsqConfig& cfg) {
  TokenHistogram h;
  for (std::size_t r = 0; r < cfg.channels(); ++r) h.channel_marginals.emplace_back(cfg.levels[r], 0);
  for (auto mu : indices) {
    ++h.counts[mu];
    ++h.total;
    const auto digits = code_digits(index_to_code(mu, cfg), cfg);
    for (std::size_t r = 0; r < digits.size(); ++r) ++h.channel_marginals[r][digits[r]];
  }
  return h;
}

// ---------------------------------------------------------------------------
// Token files: "CSSL-TOK 1 <d'> <levels> <frame_period_ms>" then one index
// per line.

struct TokenFile {
  FsqConfig fsq;
  double frame_period_ms = 40.0;
  std::vector<std::uint64_t> indices;
};

inline void write_tokens(std::ostream& os, const TokenFile& f) {
  os << "CSSL-TOK 1 " << f.fsq.channels() << ' ' << f.fsq.to_string() << ' ' << f.frame_period_ms << '\n';
  for (auto mu : f.indices) os << mu << '\n';
}

inline TokenFile read_tokens(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw FormatError("token file: missing header");
  std::istringstream hs(header);
  std::string magic, levels;
  int version = 0;
  std::size_t channels = 0;
  TokenFile f;
  if (!(hs >> magic >> version >> channels >> levels >> f.frame_period_ms) || magic != "CSSL-TOK") {
    throw FormatError("token file: malformed header '" + header + "'");
  }
  if (version != 1) throw FormatError("token file: unsupported version " + std::to_string(version));
  try {
    f.fsq = FsqConfig::parse(levels);
  } catch (const UsageError& e) {
    throw FormatError(std::string("token file: ") + e.what());
  }
  if (f.fsq.channels() != channels) throw FormatError("token file: channel count disagrees with levels");
  const std::uint64_t v = f.fsq.vocab_size();
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::size_t used = 0;
    std::uint64_t mu = 0;
    try {
      mu = std::stoull(line, &used);
    } catch (const std::logic_error&) {
      throw FormatError("token file: bad index '" + line + "'");
    }
    if (used != line.size() || mu >= v) throw FormatError("token file: bad index '" + line + "'");
    f.indices.push_back(mu);
  }
  return f;
}

}  // namespace chunkssl
