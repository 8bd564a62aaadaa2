#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "chunkssl/gradcheck.hpp"
#include "chunkssl/pretrain.hpp"

using namespace chunkssl;

namespace {

EncoderConfig tiny_encoder(std::size_t blocks = 1) {
  EncoderConfig c;
  c.input_dim = 3;
  c.stack = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.ff_dim = 12;
  c.blocks = blocks;
  c.conv_spec = {1, 1};
  c.rel_window = 4;
  return c;
}

std::vector<FsqCode> random_codes(std::size_t n, const FsqConfig& fsq, Rng& rng) {
  std::vector<FsqCode> out;
  std::uniform_int_distribution<std::uint64_t> pick(0, fsq.vocab_size() - 1);
  for (std::size_t i = 0; i < n; ++i) out.push_back(index_to_code(pick(rng), fsq));
  return out;
}

// Central differences over every trainable entry of a parameter set.
double param_gradcheck(ParamSet<double>& params, const std::function<Var<double>(const Bound<double>&)>& f) {
  Tape<double> tape(true);
  Bound<double> b(tape, params, true);
  tape.backward(f(b));
  const auto grads = b.gradients(params);
  auto eval = [&] {
    Tape<double> t(false);
    Bound<double> bb(t, params, false);
    return f(bb).value().item();
  };
  double worst = 0;
  for (const auto& name : params.names()) {
    if (params.frozen(name)) continue;
    Array<double>& w = params.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + 1e-5;
      const double up = eval();
      w[i] = saved - 1e-5;
      const double down = eval();
      w[i] = saved;
      const double est = (up - down) / 2e-5, a = grads.at(name)[i];
      worst = std::max(worst, std::abs(a - est) / std::max({std::abs(a), std::abs(est), 1e-6}));
    }
  }
  return worst;
}

std::vector<Example<double>> toy_examples(const EncoderConfig& cfg, std::size_t count, std::size_t frames, Rng& rng) {
  std::vector<Example<double>> data;
  for (std::size_t u = 0; u < count; ++u) {
    Example<double> e;
    e.id = "toy" + std::to_string(u);
    e.stacked = random_normal<double>(frames, cfg.stacked_dim(), rng);
    e.codes = random_codes(frames, cfg.fsq, rng);
    e.labels.assign(frames, 0);
    data.push_back(std::move(e));
  }
  return data;
}

}  // namespace

// ---------------------------------------------------------------------------
// Chunk schedule

TEST(Schedule, DurationsToFrames) {
  ChunkSchedule s;
  s.durations_ms = {640};
  Rng rng(1);
  EXPECT_EQ(sample_chunk_frames(s, rng).frames, 16u);
  s.durations_ms = {3840};
  EXPECT_EQ(sample_chunk_frames(s, rng).frames, 96u);
}

TEST(Schedule, RejectsFractionalFrames) {
  ChunkSchedule s;
  s.durations_ms = {650};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Schedule, DrawsAreUniformOverDurations) {
  ChunkSchedule s = ChunkSchedule::pretraining();
  Rng rng(11);
  std::map<double, int> hits;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++hits[sample_chunk_frames(s, rng, i).ms];
  ASSERT_EQ(hits.size(), 6u);
  for (const auto& [ms, k] : hits) EXPECT_NEAR(k / double(n), 1.0 / 6.0, 0.02) << ms;
}

TEST(Schedule, FinetuneAlternatesOffline) {
  ChunkSchedule s = ChunkSchedule::finetuning();
  Rng rng(3);
  for (std::size_t step = 0; step < 20; ++step) {
    const auto d = sample_chunk_frames(s, rng, step);
    EXPECT_EQ(d.offline(), step % 2 == 0);
    if (d.offline()) {
      EXPECT_EQ(d.chunk_for(37), 37u);
    }
  }
}

TEST(Schedule, ReproducibleForSeed) {
  ChunkSchedule s;
  Rng a = substream(7, "chunk-sampling"), b = substream(7, "chunk-sampling");
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_chunk_frames(s, a).frames, sample_chunk_frames(s, b).frames);
}

// ---------------------------------------------------------------------------
// Masking

TEST(Masking, SixteenFrameChunksGiveEightFrameSpans) {
  Rng rng(2);
  const auto l = ChunkLayout::make(64, 16);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = select_mask_spans(l, rng);
    ASSERT_EQ(m.size(), 3u * 8u);
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t start = m[k * 8] - l.ext_begin(k);
      EXPECT_LE(start, 4u);
      for (std::size_t t = 1; t < 8; ++t) EXPECT_EQ(m[k * 8 + t], m[k * 8] + t);
    }
  }
}

TEST(Masking, SingleChunkUtteranceHasNoMask) {
  Rng rng(1);
  EXPECT_TRUE(select_mask_spans(ChunkLayout::make(10, 10), rng).empty());
  EXPECT_TRUE(select_mask_spans(ChunkLayout::make(7, 16), rng).empty());
}

TEST(Masking, OffsetOneInFirstExtendedChunk) {
  const auto l = ChunkLayout::make(12, 4);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng probe(seed);
    if (std::uniform_int_distribution<std::size_t>(0, 1)(probe) != 1) continue;
    Rng rng(seed);
    const auto m = select_mask_spans(l, rng);
    ASSERT_GE(m.size(), 2u);
    EXPECT_EQ(m[0], 13u);
    EXPECT_EQ(m[1], 14u);
    return;
  }
  FAIL() << "no seed drew offset 1";
}

TEST(Masking, NeverTouchesBaseOrPadding) {
  Rng rng(5);
  for (std::size_t valid = 1; valid < 60; valid += 3)
    for (std::size_t c : {1u, 2u, 3u, 4u, 7u, 8u}) {
      const auto l = ChunkLayout::make(valid, c);
      for (auto i : select_mask_spans(l, rng)) {
        EXPECT_TRUE(l.is_extended(i));
        EXPECT_FALSE(l.is_padding(i));
        EXPECT_LT(i, l.augmented_length());
      }
    }
}

TEST(Masking, ApplyMaskReplacesExactlyTheListedRows) {
  Rng rng(4);
  const auto x = random_normal<double>(20, 3, rng);
  const auto e = random_normal<double>(1, 3, rng);
  EXPECT_EQ(apply_mask(x, {}, e), x);
  const auto l = ChunkLayout::make(12, 4);
  const auto m = select_mask_spans(l, rng);
  EXPECT_EQ(m.size(), 4u);
  const auto y = apply_mask(x, m, e);
  const std::set<std::size_t> ms(m.begin(), m.end());
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y(i, j), ms.count(i) ? e(0, j) : x(i, j));
}

TEST(Masking, AllExtendedRowsMaskedEqualTheEmbedding) {
  const auto l = ChunkLayout::make(12, 4);
  Rng rng(6);
  const auto x = random_normal<double>(l.augmented_length(), 2, rng);
  const auto e = random_normal<double>(1, 2, rng);
  std::vector<std::size_t> all;
  for (std::size_t i = l.frames; i < l.augmented_length(); ++i) all.push_back(i);
  const auto y = apply_mask(x, all, e);
  for (auto i : all) EXPECT_EQ(take_rows(y, i, i + 1), e);
}

// ---------------------------------------------------------------------------
// Losses

TEST(Loss, SingleChannelGroupEqualsFull) {
  Rng rng(8);
  for (int k : {2, 3, 5, 8}) {
    FsqConfig fsq({k});
    Tape<double> t;
    auto out = t.constant(random_normal<double>(9, 4, rng));
    auto emb = t.constant(random_normal<double>(k, 4, rng));
    std::vector<std::size_t> masked{1, 3, 4, 8};
    auto codes = random_codes(masked.size(), fsq, rng);
    std::vector<std::uint64_t> idx;
    for (const auto& c : codes) idx.push_back(code_to_index(c, fsq));
    const double g = group_masked_loss(out, masked, codes, {emb}, fsq).loss.value().item();
    const double f = full_masked_loss(out, masked, idx, emb).value().item();
    EXPECT_NEAR(g, f, 1e-12) << "K=" << k;
  }
}

TEST(Loss, ZeroOutputsGiveUniformLoss) {
  FsqConfig fsq({5, 3, 4});
  Rng rng(1);
  Tape<double> t;
  auto out = t.constant(Array<double>(10, 6));
  std::vector<Var<double>> emb;
  for (int k : fsq.levels) emb.push_back(t.constant(random_normal<double>(k, 6, rng)));
  std::vector<std::size_t> masked{0, 2, 5, 7, 9};
  const double g = group_masked_loss(out, masked, random_codes(5, fsq, rng), emb, fsq).loss.value().item();
  EXPECT_NEAR(g, 5 * (std::log(5.0) + std::log(3.0) + std::log(4.0)), 1e-9);

  auto full = t.constant(random_normal<double>(60, 6, rng));
  std::vector<std::uint64_t> idx{0, 17, 59, 3, 3};
  EXPECT_NEAR(full_masked_loss(out, masked, idx, full).value().item(), 5 * std::log(60.0), 1e-9);
}

TEST(Loss, SaturatedFullLossVanishes) {
  Tape<double> t;
  auto out = t.constant({{20.0, 0.0, 0.0}});
  auto emb = t.constant(Array<double>::identity(3));
  EXPECT_LT(full_masked_loss(out, {0}, {0}, emb).value().item(), 1e-8);
}

TEST(Loss, FullTableAboveLimitIsCapabilityError) {
  Tape<double> t;
  auto out = t.constant(Array<double>(2, 1));
  auto emb = t.constant(Array<double>(kFullCodebookLimit + 1, 1));
  EXPECT_THROW(full_masked_loss(out, {0}, {0}, emb), CapabilityError);
  EncoderConfig cfg = tiny_encoder();
  cfg.fsq = FsqConfig::parse("5x6,3x4");
  cfg.full_codebook = true;
  EXPECT_THROW(init_encoder<double>(cfg, 1), CapabilityError);
}

TEST(Loss, OutOfRangeCodeIsUsageError) {
  FsqConfig fsq({5, 3});
  Tape<double> t;
  auto out = t.constant(Array<double>(3, 2));
  std::vector<Var<double>> emb{t.constant(Array<double>(5, 2)), t.constant(Array<double>(3, 2))};
  EXPECT_THROW(group_masked_loss(out, {0}, {{0, 2}}, emb, fsq), UsageError);
  EXPECT_THROW(group_masked_loss(out, {0, 1}, {{0, 0}}, emb, fsq), UsageError);
}

TEST(Loss, GroupGradientMatchesFiniteDifferences) {
  FsqConfig fsq({5, 3});
  Rng rng(12);
  const auto codes = random_codes(4, fsq, rng);
  const std::vector<std::size_t> masked{0, 2, 3, 5};
  auto report = finite_difference_check(
      [&](Tape<double>&, const std::vector<Var<double>>& v) {
        return group_masked_loss(v[0], masked, codes, {v[1], v[2]}, fsq).loss;
      },
      {random_normal<double>(6, 4, rng), random_normal<double>(5, 4, rng), random_normal<double>(3, 4, rng)}, 1e-5,
      1e-4);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Loss, FullGradientMatchesFiniteDifferences) {
  Rng rng(13);
  const std::vector<std::size_t> masked{1, 2, 4, 5};
  const std::vector<std::uint64_t> idx{14, 0, 7, 7};
  auto report = finite_difference_check(
      [&](Tape<double>&, const std::vector<Var<double>>& v) { return full_masked_loss(v[0], masked, idx, v[1]); },
      {random_normal<double>(6, 4, rng), random_normal<double>(15, 4, rng)}, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Loss, UnmaskedRowsDoNotAffectLoss) {
  FsqConfig fsq({5, 3});
  Rng rng(14);
  Tape<double> t;
  Array<double> o = random_normal<double>(8, 4, rng);
  std::vector<Var<double>> emb{t.constant(random_normal<double>(5, 4, rng)), t.constant(random_normal<double>(3, 4, rng))};
  const std::vector<std::size_t> masked{1, 6};
  const auto codes = random_codes(2, fsq, rng);
  const double base = group_masked_loss(t.constant(o), masked, codes, emb, fsq).loss.value().item();
  for (std::size_t i : {0u, 2u, 3u, 4u, 5u, 7u}) {
    Array<double> z = o;
    for (std::size_t j = 0; j < 4; ++j) z(i, j) = 0;
    EXPECT_EQ(group_masked_loss(t.constant(z), masked, codes, emb, fsq).loss.value().item(), base);
  }
}

// The argmax of the product distribution over all V codes decomposes into
// per-channel argmaxes.
TEST(Loss, ProductArgmaxIsPerChannelArgmax) {
  FsqConfig fsq({5, 3, 4});
  Rng rng(15);
  Tape<double> t;
  std::vector<Var<double>> emb;
  for (int k : fsq.levels) emb.push_back(t.constant(random_normal<double>(k, 5, rng)));
  auto out = t.constant(random_normal<double>(30, 5, rng));
  std::vector<std::size_t> masked(30);
  std::iota(masked.begin(), masked.end(), 0);
  auto g = group_masked_loss(out, masked, random_codes(30, fsq, rng), emb, fsq);
  for (std::size_t i = 0; i < 30; ++i) {
    FsqCode per_channel(3);
    for (std::size_t r = 0; r < 3; ++r) {
      auto row = g.logits[r].value().row_span(i);
      per_channel[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) + fsq.lo(r);
    }
    std::uint64_t best = 0;
    double best_score = -INFINITY;
    for (std::uint64_t mu = 0; mu < fsq.vocab_size(); ++mu) {
      const auto d = code_digits(index_to_code(mu, fsq), fsq);
      double s = 0;
      for (std::size_t r = 0; r < 3; ++r) s += g.logits[r].value()(i, d[r]);
      if (s > best_score) best_score = s, best = mu;
    }
    EXPECT_EQ(best, code_to_index(per_channel, fsq));
  }
}

// A linear map trained with either loss recovers the true codes of a
// separable toy set.
TEST(Loss, GroupAndFullBothFitSeparableToySet) {
  FsqConfig fsq({5, 3});
  Rng rng(16);
  const std::size_t n = 30, d = 15;
  std::vector<FsqCode> codes = random_codes(n, fsq, rng);
  std::vector<std::uint64_t> idx;
  Array<double> x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    idx.push_back(code_to_index(codes[i], fsq));
    x(i, idx[i]) = 1.0;
  }
  std::vector<std::size_t> masked(n);
  std::iota(masked.begin(), masked.end(), 0);
  for (bool group : {true, false}) {
    ParamSet<double> p;
    p.add("w", random_normal<double>(d, d, rng, 0.1));
    p.add("e0", random_normal<double>(5, d, rng, 0.1));
    p.add("e1", random_normal<double>(3, d, rng, 0.1));
    p.add("ef", random_normal<double>(15, d, rng, 0.1));
    Adam<double> opt;
    std::vector<Array<double>> logits;  // copies: each step's tape dies with the step
    for (int s = 0; s < 400; ++s) {
      Tape<double> t(true);
      Bound<double> b(t, p, true);
      Var<double> o = matmul(t.constant(x), b["w"]);
      Var<double> loss;
      if (group) {
        auto gl = group_masked_loss(o, masked, codes, {b["e0"], b["e1"]}, fsq);
        loss = gl.loss;
        logits = {gl.logits[0].value(), gl.logits[1].value()};
      } else {
        loss = full_masked_loss(o, masked, idx, b["ef"]);
        logits = {matmul_nt(o, b["ef"]).value()};
      }
      t.backward(loss);
      opt.step(p, b.gradients(p), 0.05);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (group) {
        for (std::size_t r = 0; r < 2; ++r) {
          auto row = logits[r].row_span(i);
          EXPECT_EQ(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()),
                    code_digits(codes[i], fsq)[r]);
        }
      } else {
        auto row = logits[0].row_span(i);
        EXPECT_EQ(static_cast<std::uint64_t>(std::max_element(row.begin(), row.end()) - row.begin()), idx[i]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Encoder blocks

TEST(Blocks, AttentionGradientMatchesFiniteDifferences) {
  Rng rng(21);
  const auto l = ChunkLayout::make(5, 2);
  auto mask = std::make_shared<const AttentionMask>(layout_mask(l));
  const std::size_t d = 4, n = l.augmented_length();
  auto report = finite_difference_check(
      [&](Tape<double>&, const std::vector<Var<double>>& v) {
        AttentionParams<double> p{v[1], v[2], v[3], v[4], v[5], 2, 3};
        Var<double> y = cada_attention(v[0], l, mask, p, MaskMode::exact);
        return sum(mul(y, y));
      },
      {random_normal<double>(n, d, rng), random_normal<double>(d, d, rng, 0.5), random_normal<double>(d, d, rng, 0.5),
       random_normal<double>(d, d, rng, 0.5), random_normal<double>(d, d, rng, 0.5),
       random_normal<double>(7, d, rng, 0.5)},
      1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Blocks, ConvGradientMatchesFiniteDifferences) {
  Rng rng(22);
  for (ConvSpec spec : {ConvSpec{1, 1}, ConvSpec{2, 0}, ConvSpec{0, 2}}) {
    const auto l = ChunkLayout::make(7, 3);
    auto report = finite_difference_check(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          Var<double> y = cada_depthwise_conv(v[0], v[1], l, spec);
          return sum(mul(y, y));
        },
        {random_normal<double>(l.augmented_length(), 3, rng), random_normal<double>(spec.width(), 3, rng)}, 1e-5, 1e-4);
    EXPECT_TRUE(report.passed) << report.max_relative_error;
  }
}

TEST(Blocks, FullEncoderLossGradientMatchesFiniteDifferences) {
  EncoderConfig cfg = tiny_encoder(1);
  ParamSet<double> params = init_encoder<double>(cfg, 4);
  Rng rng(23);
  const auto x = random_normal<double>(6, cfg.stacked_dim(), rng);
  const auto l = ChunkLayout::make(6, 2);
  const std::vector<std::size_t> masked{7, 9};
  const auto codes = random_codes(2, cfg.fsq, rng);
  auto loss = [&](const Bound<double>& p) -> Var<double> {
    auto fwd = encoder_forward(cfg, p, x, l, masked, MaskMode::exact);
    return group_masked_loss(fwd.output, masked, codes, {p["emb.r0"], p["emb.r1"]}, cfg.fsq).loss;
  };
  const double worst = param_gradcheck(params, loss);
  EXPECT_LE(worst, 1e-4);
}

TEST(Encoder, ZeroBlocksIsNormalisedProjection) {
  EncoderConfig cfg = tiny_encoder(0);
  ParamSet<double> params = init_encoder<double>(cfg, 1);
  Rng rng(3);
  const auto x = random_normal<double>(5, cfg.stacked_dim(), rng);
  Tape<double> t(false);
  Bound<double> p(t, params, false);
  const auto out = encoder_forward(cfg, p, x, ChunkLayout::make(5, 5), {}).output.value();
  Var<double> proj = add_row(matmul(t.constant(x), p["in.w"]), p["in.b"]);
  EXPECT_LE(max_abs_diff(out, layer_norm(proj, p["out.ln.g"], p["out.ln.b"]).value()), 1e-12);
}

TEST(Encoder, UtterancesAreIndependent) {
  EncoderConfig cfg = tiny_encoder(2);
  ParamSet<double> params = init_encoder<double>(cfg, 2);
  Rng rng(5);
  const auto a = random_normal<double>(6, cfg.stacked_dim(), rng), b = random_normal<double>(8, cfg.stacked_dim(), rng);
  auto run = [&](const Array<double>& x) {
    Tape<double> t(false);
    Bound<double> p(t, params, false);
    return encoder_forward(cfg, p, x, ChunkLayout::make(x.rows(), 2), {}).output.value();
  };
  const auto a1 = run(a), b1 = run(b), b2 = run(b), a2 = run(a);
  EXPECT_EQ(a1, a2);
  EXPECT_EQ(b1, b2);
}

TEST(Encoder, ExtendedFramesTargetTheirSourceCodes) {
  const auto l = ChunkLayout::make(12, 4);
  for (std::size_t i = l.frames; i < l.augmented_length(); ++i) {
    const std::size_t k = (i - l.frames) / l.chunk;
    EXPECT_EQ(l.original_position(i), (k + 1) * l.chunk + (i - l.ext_begin(k)));
  }
}

// ---------------------------------------------------------------------------
// Trainer

TEST(Trainer, SameSeedSameTrajectory) {
  EncoderConfig cfg = tiny_encoder(1);
  Rng rng(9);
  const auto data = toy_examples(cfg, 3, 12, rng);
  PretrainConfig pc;
  pc.schedule.durations_ms = {80, 160};
  pc.total_steps = 8;
  pc.batch = 2;
  auto run = [&] {
    Pretrainer<double> tr(cfg, init_encoder<double>(cfg, 3), pc, 3);
    std::vector<double> losses;
    for (int s = 0; s < 8; ++s) losses.push_back(tr.step(data).loss);
    return std::make_pair(losses, tr.params());
  };
  const auto [la, pa] = run();
  const auto [lb, pb] = run();
  EXPECT_EQ(la, lb);
  for (const auto& n : pa.names()) EXPECT_EQ(pa.at(n), pb.at(n));
}

TEST(Trainer, FirstStepLossIsNearUniform) {
  EncoderConfig cfg = tiny_encoder(1);
  Rng rng(10);
  const auto data = toy_examples(cfg, 2, 24, rng);
  PretrainConfig pc;
  pc.schedule.durations_ms = {160};
  Pretrainer<double> tr(cfg, init_encoder<double>(cfg, 1), pc, 1);
  const auto r = tr.step(data);
  ASSERT_GT(r.masked_frames, 0u);
  const double uniform = r.masked_frames * (std::log(5.0) + std::log(3.0));
  EXPECT_NEAR(r.loss, uniform, 0.2 * uniform);
}

TEST(Trainer, ChunkChangesKeepParameterShapes) {
  EncoderConfig cfg = tiny_encoder(1);
  Rng rng(11);
  const auto data = toy_examples(cfg, 2, 20, rng);
  PretrainConfig pc;
  pc.schedule.durations_ms = {80, 160, 240, 400};
  const auto init = init_encoder<double>(cfg, 2);
  Pretrainer<double> tr(cfg, init, pc, 2);
  std::set<double> seen;
  for (int s = 0; s < 12; ++s) seen.insert(tr.step(data).chunk_ms);
  EXPECT_GT(seen.size(), 1u);
  ASSERT_EQ(tr.params().names(), init.names());
  for (const auto& n : init.names()) {
    EXPECT_EQ(tr.params().at(n).rows(), init.at(n).rows());
    EXPECT_EQ(tr.params().at(n).cols(), init.at(n).cols());
  }
}

TEST(Trainer, SingleChunkUtteranceSkipsUpdate) {
  EncoderConfig cfg = tiny_encoder(1);
  Rng rng(12);
  const auto data = toy_examples(cfg, 1, 3, rng);
  PretrainConfig pc;
  pc.schedule.durations_ms = {160};
  const auto init = init_encoder<double>(cfg, 2);
  Pretrainer<double> tr(cfg, init, pc, 2);
  const auto r = tr.step(data);
  EXPECT_EQ(r.masked_frames, 0u);
  EXPECT_FALSE(r.updated);
  for (const auto& n : init.names()) EXPECT_EQ(tr.params().at(n), init.at(n));
}

TEST(Trainer, FullLossNeedsFullTable) {
  EncoderConfig cfg = tiny_encoder(1);
  PretrainConfig pc;
  pc.loss = LossKind::full;
  EXPECT_THROW(Pretrainer<double>(cfg, init_encoder<double>(cfg, 1), pc, 1), ConfigError);
  cfg.full_codebook = true;
  Rng rng(1);
  const auto data = toy_examples(cfg, 1, 12, rng);
  pc.schedule.durations_ms = {160};
  Pretrainer<double> tr(cfg, init_encoder<double>(cfg, 1), pc, 1);
  const auto r = tr.step(data);
  EXPECT_TRUE(r.updated);
  EXPECT_NEAR(r.loss, r.masked_frames * std::log(15.0), 0.2 * r.masked_frames * std::log(15.0));
}

TEST(Trainer, WarmupThenInverseSqrt) {
  EncoderConfig cfg = tiny_encoder(1);
  PretrainConfig pc;
  pc.total_steps = 1000;
  pc.warmup_fraction = 0.01;
  Pretrainer<double> tr(cfg, init_encoder<double>(cfg, 1), pc, 1);
  EXPECT_NEAR(tr.learning_rate(5), 3e-4 * 0.5, 1e-12);
  EXPECT_NEAR(tr.learning_rate(10), 3e-4, 1e-12);
  EXPECT_NEAR(tr.learning_rate(40), 3e-4 * 0.5, 1e-12);
}
