#include <catch2/catch_amalgamated.hpp>

#include "oracle.hpp"
#include "tsegcn/grad_check.hpp"
#include "tsegcn/tsegc.hpp"

using namespace tsegcn;

namespace {

SkeletonGraph path5() { return SkeletonGraph(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}}); }

std::vector<int> hop_vec(const HopTable& t) {
  std::vector<int> v(t.n() * t.n());
  for (std::size_t i = 0; i < t.n(); ++i)
    for (std::size_t j = 0; j < t.n(); ++j) v[i * t.n() + j] = t.at(i, j);
  return v;
}

TsegcLayer make_layer(ParamStore& ps, const SkeletonGraph& g, const TsegcConfig& cfg, std::uint64_t seed,
                      const std::string& prefix = "gc") {
  Rng rng(seed);
  return TsegcLayer(ps, prefix, cfg, normalize_adjacency(g), hop_table(g, g.n()), rng);
}

}  // namespace

TEST_CASE("partition_features splits contiguous channel groups") {
  // K=2, C'=3, identity-padded weight: partitions are columns 0-2 / 3-5.
  Tensor w({4, 6});
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;  // identity into first 4 of 6 columns
  Tensor b({6});
  Rng rng(2);
  Tensor x = rng.uniform_tensor({1, 3, 4}, -1.0, 1.0);
  Tensor parts = partition_features(x, w, b, 2);
  REQUIRE(parts.shape() == Shape{1, 3, 2, 3});
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      REQUIRE(parts.at(0, n, 0, c) == Catch::Approx(x.at(0, n, c)).margin(1e-15));
      const double expected = (c == 0) ? x.at(0, n, 3) : 0.0;  // column 3 is identity, 4-5 are zero
      REQUIRE(parts.at(0, n, 1, c) == Catch::Approx(expected).margin(1e-15));
    }
  }

  // K=1 degenerates to the full embedding.
  Tensor whole = partition_features(x, w, b, 1);
  REQUIRE(whole.shape() == Shape{1, 3, 1, 6});

  // concatenating partitions back reproduces the embedding exactly
  Rng rng2(3);
  Tensor w2 = rng2.uniform_tensor({4, 6}, -1.0, 1.0);
  Tensor b2 = rng2.uniform_tensor({6}, -0.5, 0.5);
  Tensor p3 = partition_features(x, w2, b2, 3);
  Tensor flat = partition_features(x, w2, b2, 1);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t c = 0; c < 2; ++c) REQUIRE(p3.at(0, n, k, c) == flat.at(0, n, 0, k * 2 + c));
}

TEST_CASE("pairwise_distance hand cases and properties") {
  // identical embeddings -> all zeros
  Tensor same({1, 4, 3}, 0.7);
  Tensor d0 = pairwise_distance(same);
  for (std::size_t i = 0; i < d0.size(); ++i) REQUIRE(d0[i] == 0.0);

  // 1-D embeddings [0, 3]
  Tensor e = Tensor::from({1, 2, 1}, {0.0, 3.0});
  Tensor d = pairwise_distance(e);
  REQUIRE(d.at(0, 0, 1) == -9.0);
  REQUIRE(d.at(0, 1, 0) == -9.0);
  REQUIRE(d.at(0, 0, 0) == 0.0);

  // random: non-positive, symmetric, equal to a brute-force pair loop
  Rng rng(5);
  Tensor r = rng.uniform_tensor({2, 6, 4}, -2.0, 2.0);
  Tensor dr = pairwise_distance(r);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
          const double dd = r.at(b, i, c) - r.at(b, j, c);
          acc += dd * dd;
        }
        REQUIRE(dr.at(b, i, j) == Catch::Approx(-acc).margin(1e-12));
        REQUIRE(dr.at(b, i, j) <= 0.0);
        REQUIRE(dr.at(b, i, j) == dr.at(b, j, i));
      }
}

TEST_CASE("calibration is tanh with range (-1, 0]") {
  Tensor z({1, 3, 3}, 0.0);
  Tensor c0 = calibration(z);
  for (std::size_t i = 0; i < c0.size(); ++i) REQUIRE(c0[i] == 0.0);

  Tensor d = Tensor::from({1, 2, 2}, {0.0, -9.0, -9.0, 0.0});
  Tensor c = calibration(d);
  REQUIRE(c.at(0, 0, 1) == Catch::Approx(oracle::tanh_series(-9.0)).margin(1e-15));
  REQUIRE(std::abs(c.at(0, 0, 1) + 0.99999997) < 1e-7);
  for (std::size_t i = 0; i < c.size(); ++i) {
    REQUIRE(c[i] <= 0.0);
    REQUIRE(c[i] > -1.0);
  }
}

TEST_CASE("scale_mask: self scale is the identity for every input") {
  auto g = path5();
  const HopTable hop = hop_table(g, 5);
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor e = rng.uniform_tensor({1, 5, 3}, -1.0, 1.0);
    Tensor d = pairwise_distance(e);
    Tensor h = scale_mask(d, hop, 3);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) REQUIRE(h.at(0, 0, i, j) == (i == j ? 1.0 : 0.0));
  }
}

TEST_CASE("scale_mask activates the whole hop class of the chosen neighbor") {
  // P5 chain, joint 2: make joint 1 its nearest non-self neighbor; the
  // scale-1 row must activate joints {1, 3} (the mirrored hop-1 pair).
  auto g = path5();
  const HopTable hop = hop_table(g, 5);
  Tensor e = Tensor::from({1, 5, 1}, {0.0, 2.0, 2.1, 3.0, 5.0});
  Tensor d = pairwise_distance(e);
  Tensor h = scale_mask(d, hop, 2);
  REQUIRE(h.at(0, 1, 2, 1) == 1.0);
  REQUIRE(h.at(0, 1, 2, 3) == 1.0);
  REQUIRE(h.at(0, 1, 2, 0) == 0.0);
  REQUIRE(h.at(0, 1, 2, 2) == 0.0);
  REQUIRE(h.at(0, 1, 2, 4) == 0.0);
}

TEST_CASE("scale_mask rows may coincide when neighbors share a hop class") {
  auto g = path5();
  const HopTable hop = hop_table(g, 5);
  // joint 0: neighbors 1 and 2 of the embedding both sit at hop 1 and 2;
  // craft embeddings so its two nearest non-self joints are 1 then 3 (hop 1 and 3)
  Tensor e = Tensor::from({1, 5, 1}, {0.0, 0.1, 5.0, 0.2, 9.0});
  Tensor d = pairwise_distance(e);
  Tensor h = scale_mask(d, hop, 3);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double v = h.at(0, s, i, j);
        REQUIRE((v == 0.0 || v == 1.0));
      }
  // rows h[s][i] are hop-class indicators
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t j2 = 0; j2 < 5; ++j2)
          if (hop.at(i, j) == hop.at(i, j2)) REQUIRE(h.at(0, s, i, j) == h.at(0, s, i, j2));
}

TEST_CASE("scale_mask rejects k > N") {
  auto g = path5();
  const HopTable hop = hop_table(g, 5);
  Tensor d({1, 5, 5});
  REQUIRE_THROWS_AS(scale_mask(d, hop, 6), ConfigError);
}

TEST_CASE("assemble_topology special cases") {
  const std::size_t N = 4, K = 2;
  Rng rng(9);
  Tensor shared = rng.uniform_tensor({N, N}, -1.0, 1.0);
  Tensor calib = rng.uniform_tensor({1, N, N}, -0.9, 0.0);
  Tensor free_topo = rng.uniform_tensor({K, N, N}, -1.0, 1.0);

  Tensor ones({1, K, N, N}, 1.0);
  Tensor zero_free({K, N, N}, 0.0);
  auto full = assemble_topology(ones, calib, shared, zero_free, 1.0, 0.0);
  for (std::size_t s = 0; s < K; ++s)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) REQUIRE(full.assembled.at(0, s, i, j) == shared.at(i, j));

  Tensor eye({1, K, N, N});
  for (std::size_t s = 0; s < K; ++s)
    for (std::size_t i = 0; i < N; ++i) eye.at(0, s, i, i) = 1.0;
  auto diag = assemble_topology(eye, calib, shared, zero_free, 1.0, 0.0);
  for (std::size_t s = 0; s < K; ++s)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        REQUIRE(diag.reactivated.at(0, s, i, j) == (i == j ? shared.at(i, j) : 0.0));

  // alpha = beta = 0 leaves only the free term
  auto only_free = assemble_topology(ones, calib, shared, free_topo, 0.0, 0.0);
  for (std::size_t s = 0; s < K; ++s)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) REQUIRE(only_free.assembled.at(0, s, i, j) == free_topo.at(s, i, j));
}

TEST_CASE("tsegc_forward single-joint degenerate case") {
  SkeletonGraph g(1, {});
  ParamStore ps;
  TsegcConfig cfg{1, 2, 3, 1, 8};
  auto layer = make_layer(ps, g, cfg, 4);
  Rng rng(6);
  Tensor x = rng.uniform_tensor({1, 1, 2, 2}, -1.0, 1.0);
  Tensor out = layer.forward(ps, ag::constant(x)).value();
  REQUIRE(out.shape() == Shape{1, 1, 2, 3});

  // reduces to gelu(z * x * W): z = alpha*1*1 + beta*calib + free = 1 + free[0]
  const double z = 1.0 + ps.value("gc.free_topo")[0];
  const Tensor& fw = ps.value("gc.feat_w");
  const Tensor& ow = ps.value("gc.out_w");
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        double feat = 0.0;
        for (std::size_t i = 0; i < 2; ++i) feat += x.at(0, 0, t, i) * fw.at(i, c);
        acc += z * feat * ow.at(c, o);
      }
      REQUIRE(out.at(0, 0, t, o) == Catch::Approx(acc * oracle::gaussian_cdf(acc)).margin(1e-12));
    }
}

TEST_CASE("tsegc_forward zero input gives zero output at zero-bias init") {
  auto g = path5();
  ParamStore ps;
  auto layer = make_layer(ps, g, TsegcConfig{5, 4, 4, 2, 8}, 7);
  Tensor x({1, 5, 2, 4}, 0.0);
  Tensor out = layer.forward(ps, ag::constant(x)).value();
  for (std::size_t i = 0; i < out.size(); ++i) REQUIRE(out[i] == 0.0);
}

TEST_CASE("tsegc_forward matches the dense-loop reference") {
  auto g = path5();
  ParamStore ps;
  TsegcConfig cfg{5, 4, 4, 2, 8};
  auto layer = make_layer(ps, g, cfg, 12345);
  Rng rng(99);
  Tensor x = rng.uniform_tensor({1, 5, 2, 4}, -1.5, 1.5);
  Tensor out = layer.forward(ps, ag::constant(x)).value();

  oracle::TsegcRefParams p;
  p.feat_w = ps.value("gc.feat_w");
  p.feat_b = ps.value("gc.feat_b");
  p.topo_w = ps.value("gc.topo_w");
  p.shared_topo = ps.value("gc.shared_topo");
  p.free_topo = ps.value("gc.free_topo");
  p.react_gain = ps.value("gc.react_gain")[0];
  p.calib_gain = 0.25;
  ps.value("gc.calib_gain")[0] = 0.25;  // exercise the calibration term too
  p.out_w = ps.value("gc.out_w");
  p.out_b = ps.value("gc.out_b");
  Tensor out2 = layer.forward(ps, ag::constant(x)).value();
  Tensor ref = oracle::ref_tsegc_forward(x, hop_vec(layer.hop()), p, 2);
  REQUIRE(out2.shape() == ref.shape());
  REQUIRE(max_abs_diff(out2, ref) < 1e-12);

  // and with the default calib gain as well
  p.calib_gain = 0.0;
  ps.value("gc.calib_gain")[0] = 0.0;
  Tensor ref0 = oracle::ref_tsegc_forward(x, hop_vec(layer.hop()), p, 2);
  REQUIRE(max_abs_diff(out, ref0) < 1e-12);
}

TEST_CASE("tsegc determinism: identical inputs give bitwise-identical outputs") {
  auto g = path5();
  ParamStore ps;
  auto layer = make_layer(ps, g, TsegcConfig{5, 4, 6, 3, 4}, 2024);
  Rng rng(1);
  Tensor x = rng.uniform_tensor({2, 5, 3, 4}, -1.0, 1.0);
  Tensor a = layer.forward(ps, ag::constant(x)).value();
  Tensor b = layer.forward(ps, ag::constant(x)).value();
  REQUIRE(a == b);
}

TEST_CASE("same seed rebuilds bitwise-identical layer parameters") {
  auto g = path5();
  ParamStore ps1, ps2;
  make_layer(ps1, g, TsegcConfig{5, 4, 6, 3, 4}, 77);
  make_layer(ps2, g, TsegcConfig{5, 4, 6, 3, 4}, 77);
  for (const auto& [name, e] : ps1) REQUIRE(e.value == ps2.value(name));
}

TEST_CASE("reactivation gradient masking") {
  auto g = path5();
  ParamStore ps;
  TsegcConfig cfg{5, 3, 4, 2, 4};
  auto layer = make_layer(ps, g, cfg, 31);
  Rng rng(14);
  Tensor x = rng.uniform_tensor({2, 5, 2, 3}, -1.0, 1.0);

  // Which shared_topo coordinates are covered by any mask scale?
  TopologyBundle probe;
  layer.forward(ps, ag::constant(x), &probe);
  const std::size_t N = 5, K = 2, B = 2;
  std::vector<char> covered(N * N, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < K; ++s)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          if (probe.mask.at(b, s, i, j) != 0.0) covered[i * N + j] = 1;

  auto f = [&](ParamStore& p) {
    auto out = layer.forward(p, ag::constant(x));
    auto loss = ag::sum(out);
    ag::backward(loss);
    return loss.value()[0];
  };
  ps.zero_grad();
  f(ps);
  const Tensor& stg = ps.grad("gc.shared_topo");
  bool any_masked = false;
  for (std::size_t i = 0; i < N * N; ++i) {
    if (!covered[i]) {
      any_masked = true;
      REQUIRE(stg[i] == 0.0);  // exactly zero, not approximately
    }
  }
  REQUIRE(any_masked);

  // unmasked coordinates agree with finite differences
  GradCheckOptions opt;
  opt.coord_filter = [&](const std::string& name, std::size_t idx) {
    return name == "gc.shared_topo" && covered[idx];
  };
  auto report = grad_check(f, ps, opt);
  INFO(report.worst_param << "[" << report.worst_coord << "]");
  REQUIRE(report.passed);
}

TEST_CASE("tsegc full layer gradient check") {
  auto g = path5();
  ParamStore ps;
  auto layer = make_layer(ps, g, TsegcConfig{5, 3, 4, 2, 4}, 55);
  ps.value("gc.calib_gain")[0] = 0.3;  // make the calibration path active
  Rng rng(23);
  Tensor x = rng.uniform_tensor({2, 5, 2, 3}, -1.0, 1.0);
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

TEST_CASE("mask symmetry invariant on random embeddings") {
  auto g = builtin_graph_ntu25();
  const HopTable hop = hop_table(g, 25);
  Rng rng(47);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor e = rng.uniform_tensor({1, 25, 4}, -1.0, 1.0);
    Tensor h = scale_mask(pairwise_distance(e), hop, 3);
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < 25; ++i)
        for (std::size_t j = 0; j < 25; ++j)
          for (std::size_t j2 = j + 1; j2 < 25; ++j2)
            if (hop.at(i, j) == hop.at(i, j2)) REQUIRE(h.at(0, s, i, j) == h.at(0, s, i, j2));
  }
}

TEST_CASE("permutation equivariance of the layer") {
  auto g = path5();
  const std::size_t N = 5;
  TsegcConfig cfg{N, 3, 4, 2, 4};
  ParamStore ps;
  auto layer = make_layer(ps, g, cfg, 13);

  Rng rng(71);
  Tensor x = rng.uniform_tensor({1, N, 2, 3}, -1.0, 1.0);
  Tensor base = layer.forward(ps, ag::constant(x)).value();

  const std::vector<std::size_t> perm{2, 0, 4, 1, 3};  // pi: old index -> new index
  std::vector<std::pair<std::size_t, std::size_t>> pedges;
  for (auto [i, j] : g.edges()) pedges.emplace_back(perm[i], perm[j]);
  SkeletonGraph pg(N, pedges);

  ParamStore pps;
  auto player = make_layer(pps, pg, cfg, 13, "gc");
  // transplant permuted parameters so the layers are exactly equivalent
  for (const auto& [name, e] : ps) {
    Tensor v = e.value;
    if (name == "gc.shared_topo") {
      Tensor pv({N, N});
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) pv.at(perm[i], perm[j]) = v.at(i, j);
      v = pv;
    } else if (name == "gc.free_topo") {
      Tensor pv(v.shape());
      for (std::size_t s = 0; s < cfg.k_partitions; ++s)
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < N; ++j) pv.at(s, perm[i], perm[j]) = v.at(s, i, j);
      v = pv;
    }
    pps.value(name) = v;
  }
  Tensor px({1, N, 2, 3});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t c = 0; c < 3; ++c) px.at(0, perm[n], t, c) = x.at(0, n, t, c);

  Tensor pout = player.forward(pps, ag::constant(px)).value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t c = 0; c < 4; ++c)
        REQUIRE(pout.at(0, perm[n], t, c) == Catch::Approx(base.at(0, n, t, c)).margin(1e-12));
}

TEST_CASE("calibration diagonal is exactly zero and entries non-positive") {
  auto g = path5();
  ParamStore ps;
  auto layer = make_layer(ps, g, TsegcConfig{5, 3, 4, 2, 4}, 91);
  Rng rng(15);
  Tensor x = rng.uniform_tensor({2, 5, 3, 3}, -2.0, 2.0);
  TopologyBundle probe;
  layer.forward(ps, ag::constant(x), &probe);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i) {
      REQUIRE(probe.calib.at(b, i, i) == 0.0);
      for (std::size_t j = 0; j < 5; ++j) REQUIRE(probe.calib.at(b, i, j) <= 0.0);
    }
}
