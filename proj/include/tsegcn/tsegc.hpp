#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "tsegcn/graph.hpp"
#include "tsegcn/ops.hpp"

namespace tsegcn {

/// Broadcast-mask the shared topology: out[b,s,i,j] = mask[b,s,i,j] * shared[i,j].
/// Masked-out entries pass exactly zero gradient back to the shared matrix.
inline ag::Var reactivate(const ag::Var& shared, const Tensor& mask) {
  const Tensor& sv = shared.value();
  if (sv.rank() != 2 || mask.rank() != 4 || mask.dim(2) != sv.dim(0) || mask.dim(3) != sv.dim(1))
    throw DimensionError("reactivate: " + shape_str(sv.shape()) + " vs mask " + shape_str(mask.shape()));
  const std::size_t B = mask.dim(0), K = mask.dim(1), N = sv.dim(0);
  const std::size_t nn = N * N;
  Tensor out(mask.shape());
  for (std::size_t bs = 0; bs < B * K; ++bs)
    for (std::size_t i = 0; i < nn; ++i) out[bs * nn + i] = mask[bs * nn + i] * sv[i];
  return ag::make_node(std::move(out), {shared.node()}, [shared = shared.node(), B, K, nn, mask](ag::Node& self) {
    shared->ensure_grad();
    for (std::size_t bs = 0; bs < B * K; ++bs)
      for (std::size_t i = 0; i < nn; ++i) shared->grad[i] += mask[bs * nn + i] * self.grad[bs * nn + i];
  });
}

/// Per-joint neighbor ranking used by the scale mask: the joint itself is
/// always first (self-connection preserved), the rest are ordered by
/// distance score descending (larger = nearer, scores are non-positive)
/// with ties broken by ascending joint index.
inline std::vector<std::size_t> rank_neighbors(const Tensor& d, std::size_t b, std::size_t i) {
  const std::size_t N = d.dim(1);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
    if (a == i) return c != i;
    if (c == i) return false;
    const double da = d.at(b, i, a), dc = d.at(b, i, c);
    if (da != dc) return da > dc;
    return a < c;
  });
  return order;
}

/// Indices of the k nearest embedding-space neighbors per joint, per batch
/// element. Entry [b][i][0] is always i itself.
inline std::vector<std::vector<std::vector<std::size_t>>> knn_neighbors(const Tensor& d, std::size_t k) {
  const std::size_t B = d.dim(0), N = d.dim(1);
  if (k > N) throw ConfigError("knn_neighbors: k=" + std::to_string(k) + " exceeds joint count " + std::to_string(N));
  std::vector<std::vector<std::vector<std::size_t>>> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    out[b].resize(N);
    for (std::size_t i = 0; i < N; ++i) {
      auto order = rank_neighbors(d, b, i);
      out[b][i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    }
  }
  return out;
}

/// Scale mask over hop-equivalence classes. For each joint i and scale s,
/// row [s][i] marks every joint whose hop distance from i equals the hop
/// distance of i's s-th nearest neighbor. Scale 0 is always the identity
/// row (the nearest neighbor is the joint itself at hop 0).
inline Tensor scale_mask(const Tensor& d, const HopTable& hop, std::size_t k) {
  if (d.rank() != 3 || d.dim(1) != d.dim(2))
    throw DimensionError("scale_mask: expected [B,N,N] distances, got " + shape_str(d.shape()));
  const std::size_t B = d.dim(0), N = d.dim(1);
  if (hop.n() != N) throw DimensionError("scale_mask: hop table covers " + std::to_string(hop.n()) + " joints, not " +
                                         std::to_string(N));
  if (k > N) throw ConfigError("scale_mask: k=" + std::to_string(k) + " exceeds joint count " + std::to_string(N));
  Tensor h({B, k, N, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      const auto order = rank_neighbors(d, b, i);
      for (std::size_t s = 0; s < k; ++s) {
        const int target = hop.at(i, order[s]);
        for (std::size_t j = 0; j < N; ++j)
          if (hop.at(i, j) == target) h.at(b, s, i, j) = 1.0;
      }
    }
  return h;
}

/// Negative squared pairwise distances of joint embeddings [B,N,C] -> [B,N,N].
inline Tensor pairwise_distance(const Tensor& e) {
  return ag::neg_pairwise_sqdist(ag::constant(e)).value();
}

/// Calibration matrix: tanh of the (non-positive) distance scores.
inline Tensor calibration(const Tensor& d) { return ag::tanh_op(ag::constant(d)).value(); }

/// Feature partitioning: x[B,N,C_in] * feat_w (+ feat_b), split into K
/// contiguous channel groups -> [B,N,K,C'].
inline Tensor partition_features(const Tensor& x, const Tensor& feat_w, const Tensor& feat_b,
                                 std::size_t k_partitions) {
  if (x.rank() != 3) throw DimensionError("partition_features: expected [B,N,C], got " + shape_str(x.shape()));
  ag::Var xt = ag::constant(x);
  ag::Var w = ag::constant(feat_w);
  ag::Var bias = ag::constant(feat_b);
  Tensor t = ag::linear(xt, w, &bias).value();  // [B,N,K*C']
  const std::size_t total = t.shape().back();
  if (k_partitions == 0 || total % k_partitions != 0)
    throw DimensionError("partition_features: width " + std::to_string(total) + " not divisible into " +
                         std::to_string(k_partitions) + " partitions");
  const std::size_t B = t.dim(0), N = t.dim(1), cp = total / k_partitions;
  Tensor out({B, N, k_partitions, cp});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < k_partitions; ++k)
        for (std::size_t c = 0; c < cp; ++c) out.at(b, n, k, c) = t.at(b, n, k * cp + c);
  return out;
}

/// Assembled topology pieces for one input batch.
struct TopologyBundle {
  Tensor calib;        // [B,N,N] calibration matrix
  Tensor mask;         // [B,K,N,N] binary scale mask
  Tensor reactivated;  // [B,K,N,N] mask * shared topology
  Tensor assembled;    // [B,K,N,N] full learned topology
};

/// Pure-forward topology assembly from precomputed mask and calibration.
inline TopologyBundle assemble_topology(const Tensor& mask, const Tensor& calib, const Tensor& shared_topo,
                                        const Tensor& free_topo, double react_gain, double calib_gain) {
  ag::Var react = reactivate(ag::constant(shared_topo), mask);
  ag::Var z = ag::assemble_topology_stack(react, ag::constant(calib), ag::constant(free_topo),
                                          ag::constant(Tensor::scalar(react_gain)),
                                          ag::constant(Tensor::scalar(calib_gain)));
  return TopologyBundle{calib, mask, react.value(), z.value()};
}

struct TsegcConfig {
  std::size_t n_joints = 0;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t k_partitions = 3;
  std::size_t r_red = 8;

  std::size_t c_prime() const {
    const std::size_t cp = c_out / k_partitions;
    if (k_partitions < 1) throw ConfigError("k_partitions must be >= 1");
    if (cp < 1)
      throw ConfigError("c_out=" + std::to_string(c_out) + " too small for K=" + std::to_string(k_partitions));
    return cp;
  }
  std::size_t c_embed() const { return std::max<std::size_t>(1, c_in / r_red); }
};

/// Graph convolution layer with symmetry-aware topology reactivation.
///
/// The topology pathway embeds the temporal mean of the input, turns
/// pairwise embedding distances into a calibration matrix and a KNN scale
/// mask over hop classes, and reassembles a per-sample topology per channel
/// partition; the feature pathway mixes each partition with its topology.
/// KNN membership is piecewise-constant in the embeddings: gradients flow
/// through the calibration matrix and the reactivated values only.
class TsegcLayer {
 public:
  TsegcLayer(ParamStore& ps, std::string prefix, const TsegcConfig& cfg, const NormalizedAdjacency& adjacency,
             HopTable hop, Rng& rng)
      : prefix_(std::move(prefix)), cfg_(cfg), hop_(std::move(hop)) {
    if (hop_.n() != cfg_.n_joints) throw ConfigError(prefix_ + ": hop table does not match joint count");
    const std::size_t cp = cfg_.c_prime();
    const std::size_t ce = cfg_.c_embed();
    const double feat_bound = 1.0 / std::sqrt(static_cast<double>(cfg_.c_in));
    const double out_bound = 1.0 / std::sqrt(static_cast<double>(cfg_.k_partitions * cp));
    ps.add(name("feat_w"), rng.uniform_tensor({cfg_.c_in, cfg_.k_partitions * cp}, -feat_bound, feat_bound));
    ps.add(name("feat_b"), Tensor({cfg_.k_partitions * cp}));
    ps.add(name("topo_w"), rng.uniform_tensor({cfg_.c_in, ce}, -feat_bound, feat_bound));
    ps.add(name("shared_topo"), adjacency.a_hat);
    ps.add(name("free_topo"), rng.uniform_tensor({cfg_.k_partitions, cfg_.n_joints, cfg_.n_joints}, -1e-4, 1e-4));
    ps.add(name("react_gain"), Tensor::scalar(1.0), /*no_decay=*/true);
    ps.add(name("calib_gain"), Tensor::scalar(0.0), /*no_decay=*/true);
    ps.add(name("out_w"), rng.uniform_tensor({cfg_.k_partitions * cp, cfg_.c_out}, -out_bound, out_bound));
    ps.add(name("out_b"), Tensor({cfg_.c_out}));
  }

  const TsegcConfig& config() const { return cfg_; }
  const HopTable& hop() const { return hop_; }
  std::string name(const std::string& leaf) const { return prefix_ + "." + leaf; }

  /// x: [B,N,T,C_in] -> [B,N,T,C_out]. One topology per sample, shared by
  /// all frames. If probe is given it receives the topology tensors.
  ag::Var forward(ParamStore& ps, const ag::Var& x, TopologyBundle* probe = nullptr) const {
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.dim(1) != cfg_.n_joints || xv.dim(3) != cfg_.c_in)
      throw DimensionError(prefix_ + ": input " + shape_str(xv.shape()) + " does not match layer config (N=" +
                           std::to_string(cfg_.n_joints) + ", C_in=" + std::to_string(cfg_.c_in) + ")");
    ag::Var feat_w = ag::param(ps, name("feat_w"));
    ag::Var feat_b = ag::param(ps, name("feat_b"));
    ag::Var topo_w = ag::param(ps, name("topo_w"));
    ag::Var shared = ag::param(ps, name("shared_topo"));
    ag::Var free_topo = ag::param(ps, name("free_topo"));
    ag::Var react_gain = ag::param(ps, name("react_gain"));
    ag::Var calib_gain = ag::param(ps, name("calib_gain"));
    ag::Var out_w = ag::param(ps, name("out_w"));
    ag::Var out_b = ag::param(ps, name("out_b"));

    // Topology pathway on the temporal mean.
    ag::Var pooled = ag::temporal_mean(x);
    ag::Var embed = ag::linear(pooled, topo_w);  // bias-free: equal joints give exactly zero distance
    ag::Var dist = ag::neg_pairwise_sqdist(embed);
    ag::Var calib = ag::tanh_op(dist);
    Tensor mask = scale_mask(dist.value(), hop_, cfg_.k_partitions);
    ag::Var react = reactivate(shared, mask);
    ag::Var z = ag::assemble_topology_stack(react, calib, free_topo, react_gain, calib_gain);

    // Feature pathway.
    ag::Var features = ag::linear(x, feat_w, &feat_b);  // [B,N,T,K*C']
    const std::size_t cp = cfg_.c_prime();
    std::vector<ag::Var> parts;
    parts.reserve(cfg_.k_partitions);
    for (std::size_t k = 0; k < cfg_.k_partitions; ++k) {
      ag::Var xk = ag::slice_last(features, k * cp, cp);
      ag::Var zk = ag::partition_slice(z, k);
      parts.push_back(ag::topology_apply(zk, xk));
    }
    ag::Var merged = ag::concat_last(parts);
    ag::Var out = ag::gelu(ag::linear(merged, out_w, &out_b));

    if (probe) {
      probe->calib = calib.value();
      probe->mask = mask;
      probe->reactivated = react.value();
      probe->assembled = z.value();
    }
    return out;
  }

 private:
  std::string prefix_;
  TsegcConfig cfg_;
  HopTable hop_;
};

}  // namespace tsegcn
