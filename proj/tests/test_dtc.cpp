#include <catch2/catch_amalgamated.hpp>

#include "oracle.hpp"
#include "tsegcn/dtc.hpp"
#include "tsegcn/grad_check.hpp"

using namespace tsegcn;

namespace {

DtcLayer make_dtc(ParamStore& ps, const DtcConfig& cfg, std::uint64_t seed, const std::string& prefix = "dtc") {
  Rng rng(seed);
  return DtcLayer(ps, prefix, cfg, rng);
}

oracle::DtcRefParams ref_params(const ParamStore& ps, const std::string& prefix, std::size_t kernel) {
  oracle::DtcRefParams p;
  p.depthwise_w = ps.value(prefix + ".depthwise_w");
  p.readout_w = ps.value(prefix + ".readout_w");
  p.offset_w = ps.value(prefix + ".offset_w");
  p.offset_b = ps.value(prefix + ".offset_b");
  p.mod_w = ps.value(prefix + ".mod_w");
  p.mod_b = ps.value(prefix + ".mod_b");
  for (std::size_t r = 0; r < kernel; ++r) p.tap_w.push_back(ps.value(prefix + ".tap_w" + std::to_string(r)));
  return p;
}

}  // namespace

TEST_CASE("weighted_readout hand cases and loop oracle") {
  Rng rng(3);
  Tensor y = rng.uniform_tensor({2, 4, 3, 5}, -1.0, 1.0);

  // uniform weights: plain mean over joints
  Tensor ones({4}, 1.0);
  Tensor z = ag::weighted_readout(ag::constant(y), ag::constant(ones)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t c = 0; c < 5; ++c) {
        double mean = 0.0;
        for (std::size_t n = 0; n < 4; ++n) mean += y.at(b, n, t, c) / 4.0;
        REQUIRE(z.at(b, t, c) == Catch::Approx(mean).margin(1e-12));
      }

  // selector weight e_0 with N=4: output = Y[0] / 4
  Tensor e0({4});
  e0[0] = 1.0;
  Tensor zs = ag::weighted_readout(ag::constant(y), ag::constant(e0)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t c = 0; c < 5; ++c) REQUIRE(zs.at(b, t, c) == Catch::Approx(y.at(b, 0, t, c) / 4.0).margin(1e-15));

  // random weights vs explicit double loop
  Tensor w = rng.uniform_tensor({4}, -1.0, 1.0);
  Tensor zr = ag::weighted_readout(ag::constant(y), ag::constant(w)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t c = 0; c < 5; ++c) {
        double acc = 0.0;
        for (std::size_t n = 0; n < 4; ++n) acc += w[n] * y.at(b, n, t, c);
        REQUIRE(zr.at(b, t, c) == Catch::Approx(acc / 4.0).margin(1e-12));
      }
}

TEST_CASE("compute_offsets initialization contract") {
  ParamStore ps;
  DtcConfig cfg{3, 4, 5, 1, 1, false};
  auto layer = make_dtc(ps, cfg, 7);
  Rng rng(9);
  Tensor x = rng.uniform_tensor({2, 3, 6, 4}, -2.0, 2.0);
  OffsetField field;
  layer.forward(ps, ag::constant(x), &field);
  for (std::size_t i = 0; i < field.offsets.size(); ++i) REQUIRE(field.offsets[i] == 0.0);
  for (std::size_t i = 0; i < field.modulation.size(); ++i) REQUIRE(field.modulation[i] == 1.0);
}

TEST_CASE("compute_offsets: zero readout input yields the bias") {
  ParamStore ps;
  DtcConfig cfg{2, 3, 5, 1, 1, false};
  auto layer = make_dtc(ps, cfg, 11);
  for (std::size_t r = 0; r < 5; ++r) ps.value("dtc.offset_b")[r] = 0.5;
  Tensor x({1, 2, 4, 3}, 0.0);  // zero input -> zero readout
  OffsetField field;
  layer.forward(ps, ag::constant(x), &field);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t r = 0; r < 5; ++r) REQUIRE(field.offsets.at(0, t, r) == 0.5);
}

TEST_CASE("offsets are per-frame data-dependent") {
  ParamStore ps;
  DtcConfig cfg{3, 4, 5, 1, 1, false};
  auto layer = make_dtc(ps, cfg, 13);
  Rng rng(13);
  // non-zero offset projection
  ps.value("dtc.offset_w") = rng.uniform_tensor({4, 5}, -0.5, 0.5);
  Tensor x = rng.uniform_tensor({1, 3, 8, 4}, -2.0, 2.0);
  OffsetField field;
  layer.forward(ps, ag::constant(x), &field);
  bool any_differ = false;
  for (std::size_t t = 1; t < 8 && !any_differ; ++t)
    for (std::size_t r = 0; r < 5; ++r)
      if (field.offsets.at(0, t, r) != field.offsets.at(0, 0, r)) any_differ = true;
  REQUIRE(any_differ);
}

TEST_CASE("deform_sample grid and interpolation cases") {
  // ramp signal x[t] = t, single joint, single channel
  const std::size_t T = 8;
  Tensor x({1, 1, T, 1});
  for (std::size_t t = 0; t < T; ++t) x.at(0, 0, t, 0) = static_cast<double>(t);

  KernelConfig kc{5, 1, 1};
  OffsetField field{Tensor({1, T, 5}), Tensor({1, T, 5}, 1.0)};

  // zero offsets: exact dilated grid sample (clamped at the edges)
  for (std::size_t t_out = 0; t_out < T; ++t_out)
    for (std::size_t r = 0; r < 5; ++r) {
      Tensor s = deform_sample(x, t_out, r, field, kc);
      const long pos = static_cast<long>(t_out) + (static_cast<long>(r) - 2);
      const long clamped = std::max(0L, std::min(pos, static_cast<long>(T) - 1));
      REQUIRE(s.at(0, 0, 0) == Catch::Approx(static_cast<double>(clamped)).margin(1e-15));
    }

  // integer offset +1 on the ramp: value = pos + 1 where in range
  for (std::size_t i = 0; i < field.offsets.size(); ++i) field.offsets[i] = 1.0;
  Tensor s1 = deform_sample(x, 3, 2, field, kc);  // pos = 3, +1 -> 4
  REQUIRE(s1.at(0, 0, 0) == 4.0);

  // fractional offset 0.5 at pos 3 -> 3.5
  for (std::size_t i = 0; i < field.offsets.size(); ++i) field.offsets[i] = 0.5;
  Tensor s2 = deform_sample(x, 3, 2, field, kc);
  REQUIRE(s2.at(0, 0, 0) == 3.5);
}

TEST_CASE("dtc_forward degenerates to the reference separable convolution") {
  Rng rng(31);
  for (const std::size_t dilation : {std::size_t{1}, std::size_t{2}})
    for (const std::size_t stride : {std::size_t{1}, std::size_t{2}}) {
      ParamStore ps;
      DtcConfig cfg{3, 4, 5, dilation, stride, false};
      auto layer = make_dtc(ps, cfg, 100 + dilation * 10 + stride);
      Tensor x = rng.uniform_tensor({2, 3, 12, 4}, -1.0, 1.0);
      Tensor out = layer.forward(ps, ag::constant(x)).value();

      std::vector<Tensor> taps;
      for (std::size_t r = 0; r < 5; ++r) taps.push_back(ps.value("dtc.tap_w" + std::to_string(r)));
      Tensor ref = oracle::ref_separable_conv(x, ps.value("dtc.depthwise_w"), taps, stride, dilation);
      REQUIRE(out.shape() == ref.shape());
      REQUIRE(max_abs_diff(out, ref) < 1e-12);
    }
}

TEST_CASE("dtc_forward with active offsets matches the nested-loop reference") {
  Rng rng(41);
  ParamStore ps;
  DtcConfig cfg{3, 4, 5, 1, 1, false};
  auto layer = make_dtc(ps, cfg, 51);
  ps.value("dtc.offset_w") = rng.uniform_tensor({4, 5}, -0.6, 0.6);
  ps.value("dtc.offset_b") = rng.uniform_tensor({5}, -0.3, 0.3);
  ps.value("dtc.mod_w") = rng.uniform_tensor({4, 5}, -0.5, 0.5);
  ps.value("dtc.mod_b") = rng.uniform_tensor({5}, -0.2, 0.2);
  ps.value("dtc.readout_w") = rng.uniform_tensor({3}, 0.5, 1.5);

  Tensor x = rng.uniform_tensor({1, 3, 8, 4}, -1.0, 1.0);
  Tensor out = layer.forward(ps, ag::constant(x)).value();
  Tensor ref = oracle::ref_dtc_forward(x, ref_params(ps, "dtc", 5), 1, 1);
  REQUIRE(max_abs_diff(out, ref) < 1e-12);

  // stride-2 case as well
  ParamStore ps2;
  DtcConfig cfg2{3, 4, 5, 2, 2, false};
  auto layer2 = make_dtc(ps2, cfg2, 52);
  ps2.value("dtc.offset_w") = rng.uniform_tensor({4, 5}, -0.6, 0.6);
  Tensor x2 = rng.uniform_tensor({2, 3, 9, 4}, -1.0, 1.0);
  Tensor out2 = layer2.forward(ps2, ag::constant(x2)).value();
  Tensor ref2 = oracle::ref_dtc_forward(x2, ref_params(ps2, "dtc", 5), 2, 2);
  REQUIRE(max_abs_diff(out2, ref2) < 1e-12);
}

TEST_CASE("output frame law T' = ceil(T/stride)") {
  for (const std::size_t stride : {std::size_t{1}, std::size_t{2}})
    for (std::size_t T = 1; T <= 64; ++T) {
      ParamStore ps;
      DtcConfig cfg{2, 4, 5, 1, stride, false};
      auto layer = make_dtc(ps, cfg, 60 + stride);
      Tensor x({1, 2, T, 4}, 0.25);
      Tensor out = layer.forward(ps, ag::constant(x)).value();
      REQUIRE(out.dim(2) == (T + stride - 1) / stride);
    }
}

TEST_CASE("stride 2 on T=64 gives 32 frames; T=52 gives 26") {
  ParamStore ps;
  DtcConfig cfg{2, 4, 5, 1, 2, false};
  auto layer = make_dtc(ps, cfg, 61);
  REQUIRE(layer.forward(ps, ag::constant(Tensor({1, 2, 64, 4}, 0.1))).value().dim(2) == 32);
  REQUIRE(layer.forward(ps, ag::constant(Tensor({1, 2, 52, 4}, 0.1))).value().dim(2) == 26);
}

TEST_CASE("huge offsets clamp to the boundary sample") {
  ParamStore ps;
  DtcConfig cfg{2, 3, 5, 1, 1, false};
  auto layer = make_dtc(ps, cfg, 71);
  const std::size_t T = 6;
  Rng rng(17);
  Tensor x = rng.uniform_tensor({1, 2, T, 3}, -1.0, 1.0);
  // offset bias far beyond the frame range
  for (std::size_t r = 0; r < 5; ++r) ps.value("dtc.offset_b")[r] = 100.0;
  Tensor out = layer.forward(ps, ag::constant(x)).value();
  REQUIRE(out.all_finite());

  // every tap samples the last frame of the depthwise output
  Tensor y = oracle::ref_depthwise(x, ps.value("dtc.depthwise_w"), 1, 1);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t co = 0; co < 3; ++co) {
        double expect = 0.0;
        for (std::size_t r = 0; r < 5; ++r)
          for (std::size_t ci = 0; ci < 3; ++ci)
            expect += ps.value("dtc.tap_w" + std::to_string(r)).at(ci, co) * y.at(0, n, T - 1, ci);
        REQUIRE(out.at(0, n, t, co) == Catch::Approx(expect).margin(1e-12));
      }
}

TEST_CASE("offset gradients pass grad_check away from interpolation kinks") {
  ParamStore ps;
  DtcConfig cfg{3, 4, 5, 1, 1, false};
  auto layer = make_dtc(ps, cfg, 81);
  Rng rng(81);
  // activate offsets/modulation, keep sampling positions off integers
  ps.value("dtc.offset_w") = rng.uniform_tensor({4, 5}, -0.05, 0.05);
  ps.value("dtc.offset_b") = Tensor::from({5}, {0.31, 0.27, 0.41, 0.33, 0.29});
  ps.value("dtc.mod_w") = rng.uniform_tensor({4, 5}, -0.2, 0.2);

  Tensor x = rng.uniform_tensor({2, 3, 7, 4}, -1.0, 1.0);

  // verify the kink-exclusion construction: all positions >= 1e-3 from integers
  OffsetField field;
  layer.forward(ps, ag::constant(x), &field);
  const std::size_t Tp = field.offsets.dim(1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < Tp; ++t)
      for (std::size_t r = 0; r < 5; ++r) {
        const double pos = static_cast<double>(t) + (static_cast<double>(r) - 2.0) + field.offsets.at(b, t, r);
        if (pos <= 0.0 || pos >= static_cast<double>(Tp - 1)) continue;  // clamped region: zero slope by design
        REQUIRE(std::abs(pos - std::round(pos)) > 1e-3);
      }

  auto f = [&](ParamStore& p) {
    auto loss = ag::sum(layer.forward(p, ag::constant(x)));
    ag::backward(loss);
    return loss.value()[0];
  };
  auto report = grad_check(f, ps, {.eps = 1e-5, .tol = 1e-4});
  INFO(report.worst_param << "[" << report.worst_coord << "] analytic=" << report.worst_analytic
                          << " numeric=" << report.worst_numeric);
  REQUIRE(report.passed);
}

TEST_CASE("receptive field bound |dt| <= 8") {
  ParamStore ps;
  DtcConfig cfg{2, 3, 5, 2, 1, false};  // dilation 2 is the widest configuration
  auto layer = make_dtc(ps, cfg, 91);
  Rng rng(91);
  const std::size_t T = 24;
  Tensor x = rng.uniform_tensor({1, 2, T, 3}, -1.0, 1.0);
  Tensor base = layer.forward(ps, ag::constant(x)).value();

  Tensor bumped = x;
  const std::size_t t_mod = 12;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c) bumped.at(0, n, t_mod, c) += 0.5;
  Tensor out = layer.forward(ps, ag::constant(bumped)).value();
  // Offsets depend on the readout, which mixes all frames; with zero-init
  // offset heads the sampling grid is fixed, so locality holds exactly.
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < 3; ++c) {
        const bool within = std::abs(static_cast<long>(t) - static_cast<long>(t_mod)) <= 8;
        if (!within) REQUIRE(out.at(0, n, t, c) == base.at(0, n, t, c));
      }
}

TEST_CASE("mbdtc channel bookkeeping and branch semantics") {
  ParamStore ps;
  MbdtcConfig cfg{3, 6, 8, 1, 5, false};
  Rng rng(101);
  MbdtcLayer layer(ps, "tc", cfg, rng);
  REQUIRE(cfg.branch_width() == 2);

  Rng rx(5);
  Tensor x = rx.uniform_tensor({1, 3, 6, 6}, -1.0, 1.0);
  Tensor out = layer.forward(ps, ag::constant(x)).value();
  REQUIRE(out.shape() == Shape{1, 3, 6, 8});

  // constant input, stride 1: the max-pool branch equals its reduced constant
  Tensor xc({1, 3, 6, 6}, 0.4);
  Tensor outc = layer.forward(ps, ag::constant(xc)).value();
  const Tensor& rw = ps.value("tc.b3.reduce_w");
  const Tensor& rb = ps.value("tc.b3.reduce_b");
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t c = 0; c < 2; ++c) {
        double red = rb[c];
        for (std::size_t i = 0; i < 6; ++i) red += 0.4 * rw.at(i, c);
        const double expect = red * oracle::gaussian_cdf(red);
        REQUIRE(outc.at(0, n, t, 4 + c) == Catch::Approx(expect).margin(1e-12));
      }

  REQUIRE_THROWS_AS(MbdtcConfig({3, 6, 10, 1, 5, false}).branch_width(), ConfigError);
}

TEST_CASE("mbdtc stride halves frames (T=52 -> 26)") {
  ParamStore ps;
  MbdtcConfig cfg{2, 4, 8, 2, 5, false};
  Rng rng(111);
  MbdtcLayer layer(ps, "tc", cfg, rng);
  Tensor x = Rng(6).uniform_tensor({1, 2, 52, 4}, -1.0, 1.0);
  Tensor out = layer.forward(ps, ag::constant(x)).value();
  REQUIRE(out.shape() == Shape{1, 2, 26, 8});
}

TEST_CASE("mbdtc gradient check") {
  ParamStore ps;
  MbdtcConfig cfg{3, 4, 8, 2, 5, false};
  Rng rng(121);
  MbdtcLayer layer(ps, "tc", cfg, rng);
  // activate the deformable heads mildly, keeping positions off integers
  ps.value("tc.b1.dtc.offset_b") = Tensor::from({5}, {0.23, 0.31, 0.37, 0.29, 0.41});
  ps.value("tc.b2.dtc.offset_b") = Tensor::from({5}, {0.27, 0.33, 0.39, 0.31, 0.43});
  Rng rx(7);
  Tensor x = rx.uniform_tensor({1, 3, 7, 4}, -1.0, 1.0);
  auto f = [&](ParamStore& p) {
    auto loss = ag::sum(layer.forward(p, ag::constant(x)));
    ag::backward(loss);
    return loss.value()[0];
  };
  auto report = grad_check(f, ps, {.eps = 1e-5, .tol = 1e-4, .coords_per_tensor = 16});
  INFO(report.worst_param << "[" << report.worst_coord << "] analytic=" << report.worst_analytic
                          << " numeric=" << report.worst_numeric);
  REQUIRE(report.passed);
}
