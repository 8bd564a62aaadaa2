#pragma once

// Synthetic speech-like corpus: a Markov chain over P phones at 10 ms, each
// frame an 80-dim Gaussian around its phone's mean vector. Alignments are
// (start_ms, end_ms, phone) triples, the shape a forced aligner emits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "chunkssl/array.hpp"
#include "chunkssl/error.hpp"
#include "chunkssl/io.hpp"
#include "chunkssl/random.hpp"

namespace chunkssl {

struct SyntheticCorpusSpec {
  std::size_t phones = 8;
  std::size_t dim = 80;
  double self_loop = 0.99;  // per 10 ms frame; mean phone length 1 s
  double next_bias = 0.9;   // share of leaving mass that goes to phone p+1
  std::vector<std::vector<double>> transition;  // explicit matrix overrides the two above
  double margin = 3.0;      // minimum pairwise distance between phone means
  double mean_scale = 1.0;
  double noise = 0.5;       // per-dimension emission std
  std::size_t utterances = 32;
  std::size_t min_frames = 600;
  std::size_t max_frames = 1000;
  double frame_period_ms = 10.0;
  std::uint64_t seed = 1;

  std::vector<std::vector<double>> transition_matrix() const {
    if (!transition.empty()) return transition;
    const std::size_t p = phones;
    std::vector<std::vector<double>> t(p, std::vector<double>(p, 0.0));
    for (std::size_t i = 0; i < p; ++i) {
      if (p == 1) {
        t[i][i] = 1.0;
        continue;
      }
      t[i][i] = self_loop;
      const double leave = 1.0 - self_loop;
      if (p == 2) {
        t[i][1 - i] = leave;
        continue;
      }
      t[i][(i + 1) % p] = leave * next_bias;
      for (std::size_t j = 0; j < p; ++j)
        if (j != i && j != (i + 1) % p) t[i][j] = leave * (1.0 - next_bias) / static_cast<double>(p - 2);
    }
    return t;
  }

  void validate() const {
    if (phones == 0) throw UsageError("corpus: need at least one phone");
    if (dim == 0) throw UsageError("corpus: feature dim must be positive");
    if (utterances == 0) throw UsageError("corpus: need at least one utterance");
    if (min_frames < 8 || max_frames < min_frames) throw UsageError("corpus: need 8 <= min_frames <= max_frames");
    if (!(noise >= 0) || !(margin >= 0) || !(mean_scale > 0)) throw UsageError("corpus: bad noise/margin/scale");
    if (!(frame_period_ms > 0)) throw UsageError("corpus: frame period must be positive");
    const auto t = transition_matrix();
    if (t.size() != phones) throw UsageError("corpus: transition matrix must be P x P");
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i].size() != phones) throw UsageError("corpus: transition matrix must be P x P");
      double s = 0;
      for (double v : t[i]) {
        if (!(v >= 0) || v > 1) throw UsageError("corpus: transition entries must lie in [0, 1]");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) throw UsageError("corpus: transition row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
};

struct Segment {
  double start_ms = 0;
  double end_ms = 0;
  int phone = 0;
};

struct Utterance {
  std::string id;
  Array<float> features;        // T x D, 10 ms frames
  std::vector<Segment> alignment;
  double frame_period_ms = 10.0;

  /// Phone of every 10 ms frame.
  std::vector<int> frame_labels() const {
    std::vector<int> labels(features.rows(), 0);
    for (const auto& s : alignment) {
      const auto a = static_cast<std::size_t>(std::llround(s.start_ms / frame_period_ms));
      const auto b = std::min(labels.size(), static_cast<std::size_t>(std::llround(s.end_ms / frame_period_ms)));
      for (std::size_t f = a; f < b; ++f) labels[f] = s.phone;
    }
    return labels;
  }
};

/// Phone means drawn at `mean_scale`, then scaled up if any pair is closer
/// than the margin.
inline std::vector<std::vector<double>> phone_means(const SyntheticCorpusSpec& spec) {
  Rng rng = substream(spec.seed, "phone-means");
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<std::vector<double>> m(spec.phones, std::vector<double>(spec.dim));
  for (auto& row : m)
    for (auto& v : row) v = spec.mean_scale * n01(rng);
  double closest = INFINITY;
  for (std::size_t a = 0; a < m.size(); ++a)
    for (std::size_t b = a + 1; b < m.size(); ++b) {
      double d = 0;
      for (std::size_t j = 0; j < spec.dim; ++j) d += (m[a][j] - m[b][j]) * (m[a][j] - m[b][j]);
      closest = std::min(closest, std::sqrt(d));
    }
  if (closest < spec.margin) {
    const double s = spec.margin / closest;
    for (auto& row : m)
      for (auto& v : row) v *= s;
  }
  return m;
}

inline Utterance generate_utterance(const SyntheticCorpusSpec& spec, const std::vector<std::vector<double>>& means,
                                    const std::vector<std::vector<double>>& trans, std::size_t index) {
  Rng rng = substream(spec.seed, "data", index);
  std::uniform_int_distribution<std::size_t> length(spec.min_frames, spec.max_frames);
  std::uniform_int_distribution<std::size_t> first(0, spec.phones - 1);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  Utterance u;
  char id[32];
  std::snprintf(id, sizeof id, "utt%04zu", index);
  u.id = id;
  u.frame_period_ms = spec.frame_period_ms;
  const std::size_t t = length(rng);
  u.features = Array<float>(t, spec.dim);
  std::size_t phone = first(rng);
  std::size_t start = 0;
  for (std::size_t f = 0; f < t; ++f) {
    if (f > 0) {
      const double r = u01(rng);
      double acc = 0;
      std::size_t next = spec.phones - 1;
      for (std::size_t j = 0; j < spec.phones; ++j) {
        acc += trans[phone][j];
        if (r < acc) {
          next = j;
          break;
        }
      }
      if (next != phone) {
        u.alignment.push_back({start * spec.frame_period_ms, f * spec.frame_period_ms, static_cast<int>(phone)});
        start = f;
        phone = next;
      }
    }
    for (std::size_t j = 0; j < spec.dim; ++j)
      u.features(f, j) = static_cast<float>(means[phone][j] + spec.noise * n01(rng));
  }
  u.alignment.push_back({start * spec.frame_period_ms, t * spec.frame_period_ms, static_cast<int>(phone)});
  return u;
}

/// Deterministic for a seed; utterances use their own sub-streams so the
/// result does not depend on `threads`.
inline std::vector<Utterance> generate_corpus(const SyntheticCorpusSpec& spec, unsigned threads = 1) {
  spec.validate();
  const auto means = phone_means(spec);
  const auto trans = spec.transition_matrix();
  std::vector<Utterance> out(spec.utterances);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(spec.utterances)));
  if (threads == 1) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = generate_utterance(spec, means, trans, i);
    return out;
  }
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < out.size(); i += threads) out[i] = generate_utterance(spec, means, trans, i);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline constexpr const char* kFeatureMagic = "CSSL-FEAT";
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string encode_features(const Array<float>& x, double frame_period_ms) {
  ByteWriter w;
  w.raw(kFeatureMagic, std::strlen(kFeatureMagic));
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(x.cols()));
  w.u32(static_cast<std::uint32_t>(x.rows()));
  w.f32(static_cast<float>(frame_period_ms));
  for (float v : x.data()) w.f32(v);
  return w.bytes();
}

struct FeatureFile {
  Array<float> features;
  double frame_period_ms = 10.0;
};

inline FeatureFile decode_features(const std::string& bytes, const std::string& what = "feature file") {
  ByteReader r(bytes, what);
  r.expect(kFeatureMagic);
  const auto version = r.u32();
  if (version != kFeatureVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::size_t d = r.u32(), t = r.u32();
  FeatureFile f;
  f.frame_period_ms = r.f32();
  if (r.remaining() != 4 * t * d) {
    throw FormatError(what + ": payload has " + std::to_string(r.remaining()) + " bytes, header implies " +
                      std::to_string(4 * t * d));
  }
  std::vector<float> data(t * d);
  for (auto& v : data) v = r.f32();
  f.features = Array<float>({t, d}, std::move(data));
  if (!f.features.all_finite()) throw FormatError(what + ": non-finite feature value");
  return f;
}

inline void write_features(const fs::path& path, const Array<float>& x, double frame_period_ms) {
  atomic_write(path, encode_features(x, frame_period_ms));
}

inline FeatureFile read_features(const fs::path& path) { return decode_features(read_file(path), path.string()); }

inline std::string encode_alignment(const std::vector<Segment>& segs) {
  std::ostringstream os;
  for (const auto& s : segs) os << s.start_ms << '\t' << s.end_ms << '\t' << s.phone << '\n';
  return os.str();
}

inline std::vector<Segment> decode_alignment(const std::string& text, const std::string& what = "alignment") {
  std::vector<Segment> segs;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Segment s;
    std::string extra;
    if (!(ls >> s.start_ms >> s.end_ms >> s.phone) || (ls >> extra) || s.end_ms <= s.start_ms || s.phone < 0) {
      throw FormatError(what + ": bad line " + std::to_string(n) + ": '" + line + "'");
    }
    if (!segs.empty() && s.start_ms != segs.back().end_ms) {
      throw FormatError(what + ": segments not contiguous at line " + std::to_string(n));
    }
    segs.push_back(s);
  }
  return segs;
}

/// Writes <dir>/<id>.feat, <dir>/<id>.ali and <dir>/corpus.tsv.
inline void write_corpus(const fs::path& dir, const std::vector<Utterance>& corpus) {
  std::string index;
  for (const auto& u : corpus) {
    write_features(dir / (u.id + ".feat"), u.features, u.frame_period_ms);
    atomic_write(dir / (u.id + ".ali"), encode_alignment(u.alignment));
    index += u.id + '\t' + u.id + ".feat\t" + u.id + ".ali\n";
  }
  atomic_write(dir / "corpus.tsv", index);
}

inline std::vector<Utterance> read_corpus(const fs::path& dir) {
  const fs::path listing = dir / "corpus.tsv";
  if (!fs::exists(listing)) throw FormatError("corpus: no corpus.tsv in " + dir.string());
  std::istringstream is(read_file(listing));
  std::vector<Utterance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, feat, ali;
    if (!(ls >> id >> feat >> ali)) throw FormatError("corpus.tsv: bad line '" + line + "'");
    Utterance u;
    u.id = id;
    auto f = read_features(dir / feat);
    u.features = std::move(f.features);
    u.frame_period_ms = f.frame_period_ms;
    u.alignment = decode_alignment(read_file(dir / ali), (dir / ali).string());
    const double covered = u.alignment.empty() ? 0.0 : u.alignment.back().end_ms;
    if (u.alignment.empty() || u.alignment.front().start_ms != 0.0 ||
        std::abs(covered - u.features.rows() * u.frame_period_ms) > 1e-6) {
      throw FormatError("corpus: alignment of " + id + " does not cover the utterance");
    }
    out.push_back(std::move(u));
  }
  if (out.empty()) throw FormatError("corpus: " + listing.string() + " lists no utterances");
  return out;
}

}  // namespace chunkssl
