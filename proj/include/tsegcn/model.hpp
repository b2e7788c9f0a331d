#pragma once

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "tsegcn/dtc.hpp"
#include "tsegcn/graph.hpp"
#include "tsegcn/tsegc.hpp"

namespace tsegcn {

struct BlockSpec {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t stride = 1;
};

struct ModelConfig {
  std::size_t n_joints = 25;
  std::size_t t_frames = 64;
  std::size_t c_in = 3;
  std::size_t c_base = 64;
  std::size_t k_partitions = 3;
  std::size_t r_red = 8;
  std::size_t n_classes = 120;
  /// Bodies folded into the batch per sample; the FLOP audit counts one
  /// sample as n_persons body streams (full-scale skeleton data carries 2).
  std::size_t n_persons = 2;
  bool use_norm = true;
  std::vector<BlockSpec> blocks;  // empty = default 9-block schedule

  /// Channel schedule C,C,C,C,2C,2C,2C,4C,4C with temporal strides at
  /// blocks 4 and 7.
  static std::vector<BlockSpec> default_schedule(std::size_t c) {
    return {{c, c, 1},         {c, c, 1},         {c, c, 1},         {c, 2 * c, 2},     {2 * c, 2 * c, 1},
            {2 * c, 2 * c, 1}, {2 * c, 4 * c, 2}, {4 * c, 4 * c, 1}, {4 * c, 4 * c, 1}};
  }

  std::vector<BlockSpec> schedule() const { return blocks.empty() ? default_schedule(c_base) : blocks; }

  static ModelConfig defaults() { return ModelConfig{}; }

  /// Desk-scale preset: 9-joint skeleton, 16 frames, narrow channels.
  static ModelConfig toy() {
    ModelConfig cfg;
    cfg.n_joints = 9;
    cfg.t_frames = 16;
    cfg.c_base = 16;
    cfg.k_partitions = 2;
    cfg.n_classes = 4;
    cfg.n_persons = 1;
    return cfg;
  }

  void validate() const {
    if (n_joints < 1) throw ConfigError("ModelConfig.n_joints must be >= 1");
    if (t_frames < 1) throw ConfigError("ModelConfig.t_frames must be >= 1");
    if (c_in < 1) throw ConfigError("ModelConfig.c_in must be >= 1");
    if (n_classes < 2) throw ConfigError("ModelConfig.n_classes must be >= 2");
    if (k_partitions < 1) throw ConfigError("ModelConfig.k_partitions must be >= 1");
    if (r_red < 1) throw ConfigError("ModelConfig.r_red must be >= 1");
    if (n_persons < 1) throw ConfigError("ModelConfig.n_persons must be >= 1");
    const auto sched = schedule();
    if (sched.empty()) throw ConfigError("ModelConfig.blocks must not be empty");
    std::size_t prev = c_base;
    for (std::size_t i = 0; i < sched.size(); ++i) {
      const auto& b = sched[i];
      const std::string at = "ModelConfig.blocks[" + std::to_string(i) + "]";
      if (b.c_in != prev) throw ConfigError(at + ".c_in=" + std::to_string(b.c_in) + " breaks the channel chain");
      if (b.c_out % 4 != 0) throw ConfigError(at + ".c_out=" + std::to_string(b.c_out) + " not divisible by 4");
      if (b.c_out < k_partitions)
        throw ConfigError(at + ".c_out=" + std::to_string(b.c_out) + " smaller than k_partitions");
      if (b.stride < 1) throw ConfigError(at + ".stride must be >= 1");
      prev = b.c_out;
    }
  }
};

/// Optional capture of intermediate results during a forward pass.
struct ForwardTrace {
  std::vector<std::size_t> block_t_out;       // temporal size after each block
  std::vector<TopologyBundle> topologies;     // per block
  std::vector<MbdtcProbe> offset_fields;      // per block
  bool want_topology = false;
  bool want_offsets = false;
};

struct LayerSummary {
  std::string name;
  std::string output_shape;
  std::size_t params = 0;
  std::size_t flops = 0;  // multiply-accumulates for one forward pass
};

namespace flops {
/// MACs of a matrix product (the audit convention: one MAC = one FLOP).
inline std::size_t matmul(std::size_t m, std::size_t k, std::size_t n) { return m * k * n; }
}  // namespace flops

/// The 9-block network: input embedding plus positional table, stacked
/// TSE-GC / MBDTC blocks with residual shortcuts and feature normalization,
/// global average pooling and a linear classifier.
class TsegcnModel {
 public:
  TsegcnModel(const ModelConfig& cfg, const SkeletonGraph& graph, std::uint64_t seed)
      : cfg_(cfg), graph_(graph), hop_(hop_table(graph, graph.n())) {
    cfg_.validate();
    if (graph.n() != cfg_.n_joints)
      throw ConfigError("graph has " + std::to_string(graph.n()) + " joints, config expects " +
                        std::to_string(cfg_.n_joints));
    Rng rng(seed);
    const NormalizedAdjacency adj = normalize_adjacency(graph);

    const double embed_bound = 1.0 / std::sqrt(static_cast<double>(cfg_.c_in));
    params_.add("embed.w", rng.uniform_tensor({cfg_.c_in, cfg_.c_base}, -embed_bound, embed_bound));
    params_.add("embed.b", Tensor({cfg_.c_base}));
    params_.add("pe", rng.uniform_tensor({cfg_.n_joints, cfg_.c_base}, -0.1, 0.1), /*no_decay=*/true);

    const auto sched = cfg_.schedule();
    for (std::size_t i = 0; i < sched.size(); ++i) {
      const BlockSpec& b = sched[i];
      const std::string prefix = "block" + std::to_string(i) + ".";
      Block blk;
      blk.spec = b;
      TsegcConfig gc{cfg_.n_joints, b.c_in, b.c_out, cfg_.k_partitions, cfg_.r_red};
      blk.gc.emplace(params_, prefix + "gc", gc, adj, hop_, rng);
      if (cfg_.use_norm) add_norm(prefix + "norm1", b.c_out);
      if (b.c_in != b.c_out) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.c_in));
        params_.add(prefix + "res1.w", rng.uniform_tensor({b.c_in, b.c_out}, -bound, bound));
        params_.add(prefix + "res1.b", Tensor({b.c_out}));
      }
      MbdtcConfig tc{cfg_.n_joints, b.c_out, b.c_out, b.stride, 5, false};
      blk.tc.emplace(params_, prefix + "tc", tc, rng);
      if (cfg_.use_norm) add_norm(prefix + "norm2", b.c_out);
      if (b.stride > 1) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.c_out));
        params_.add(prefix + "res2.w", rng.uniform_tensor({b.c_out, b.c_out}, -bound, bound));
        params_.add(prefix + "res2.b", Tensor({b.c_out}));
      }
      blocks_.push_back(std::move(blk));
    }

    const std::size_t c_final = sched.back().c_out;
    const double cls_bound = 1.0 / std::sqrt(static_cast<double>(c_final));
    params_.add("classifier.w", rng.uniform_tensor({c_final, cfg_.n_classes}, -cls_bound, cls_bound));
    params_.add("classifier.b", Tensor({cfg_.n_classes}));
  }

  const ModelConfig& config() const { return cfg_; }
  const SkeletonGraph& graph() const { return graph_; }
  const HopTable& hop() const { return hop_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParamStore& buffers() { return buffers_; }

  /// x: [B,N,T,c_in] -> logits [B,n_classes]. Training mode uses batch
  /// statistics in the normalization layers and updates running estimates.
  ag::Var forward(const Tensor& x, bool train = false, ForwardTrace* trace = nullptr) {
    if (x.rank() != 4 || x.dim(1) != cfg_.n_joints || x.dim(3) != cfg_.c_in)
      throw DimensionError("model forward: input " + shape_str(x.shape()) + " does not match config [B," +
                           std::to_string(cfg_.n_joints) + ",T," + std::to_string(cfg_.c_in) + "]");
    ag::Var embed_b = ag::param(params_, "embed.b");
    ag::Var h = ag::linear(ag::constant(x), ag::param(params_, "embed.w"), &embed_b);
    h = ag::add_joint_bias(h, ag::param(params_, "pe"));

    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      Block& blk = blocks_[i];
      const std::string prefix = "block" + std::to_string(i) + ".";

      TopologyBundle* topo = nullptr;
      if (trace && trace->want_topology) {
        trace->topologies.emplace_back();
        topo = &trace->topologies.back();
      }
      ag::Var a = blk.gc->forward(params_, h, topo);
      ag::Var r1 = h;
      if (params_.has(prefix + "res1.w")) {
        ag::Var bias = ag::param(params_, prefix + "res1.b");
        r1 = ag::linear(h, ag::param(params_, prefix + "res1.w"), &bias);
      }
      ag::Var y1 = ag::add(a, r1);
      if (cfg_.use_norm) y1 = apply_norm(prefix + "norm1", y1, train);

      MbdtcProbe* probe = nullptr;
      if (trace && trace->want_offsets) {
        trace->offset_fields.emplace_back();
        probe = &trace->offset_fields.back();
      }
      ag::Var b = blk.tc->forward(params_, y1, probe);
      ag::Var r2 = y1;
      if (blk.spec.stride > 1) r2 = ag::subsample_time(y1, blk.spec.stride);
      if (params_.has(prefix + "res2.w")) {
        ag::Var bias = ag::param(params_, prefix + "res2.b");
        r2 = ag::linear(r2, ag::param(params_, prefix + "res2.w"), &bias);
      }
      h = ag::add(b, r2);
      if (cfg_.use_norm) h = apply_norm(prefix + "norm2", h, train);
      if (trace) trace->block_t_out.push_back(h.value().dim(2));
    }

    ag::Var pooled = ag::global_avg_pool(h);
    ag::Var cls_b = ag::param(params_, "classifier.b");
    return ag::linear(pooled, ag::param(params_, "classifier.w"), &cls_b);
  }

  /// Inference logits without gradient recording.
  Tensor predict(const Tensor& x) {
    ag::NoGradGuard guard;
    return forward(x, /*train=*/false).value();
  }

  std::size_t count_params() const { return params_.count_scalars(); }

  /// Multiply-accumulate count for `batch` samples, each carrying
  /// cfg.n_persons folded body streams.
  std::size_t count_flops(std::size_t batch = 1) const {
    std::size_t total = 0;
    for (const auto& row : summary()) total += row.flops;
    return total * batch;
  }

  /// Per-layer parameter and FLOP accounting (one forward pass, batch 1,
  /// n_persons body streams).
  std::vector<LayerSummary> summary() const {
    std::vector<LayerSummary> rows;
    const std::size_t N = cfg_.n_joints;
    const std::size_t streams = cfg_.n_persons;
    std::size_t T = cfg_.t_frames;

    auto entry_params = [&](const std::string& prefix) {
      std::size_t n = 0;
      for (const auto& [name, e] : params_)
        if (name.rfind(prefix, 0) == 0) n += e.value.size();
      return n;
    };
    auto shape4 = [&](std::size_t t, std::size_t c) {
      return "[" + std::to_string(streams) + "x" + std::to_string(N) + "x" + std::to_string(t) + "x" +
             std::to_string(c) + "]";
    };

    rows.push_back({"embed", shape4(T, cfg_.c_base),
                    entry_params("embed.") + entry_params("pe"),
                    streams * flops::matmul(N * T, cfg_.c_in, cfg_.c_base)});

    const auto sched = cfg_.schedule();
    for (std::size_t i = 0; i < sched.size(); ++i) {
      const BlockSpec& b = sched[i];
      const std::string prefix = "block" + std::to_string(i) + ".";
      const TsegcConfig gc{N, b.c_in, b.c_out, cfg_.k_partitions, cfg_.r_red};
      const std::size_t cp = gc.c_prime();
      const std::size_t ce = gc.c_embed();
      const std::size_t t_out = (T + b.stride - 1) / b.stride;

      std::size_t gc_flops = 0;
      gc_flops += flops::matmul(N, b.c_in, ce);                    // topology embedding
      gc_flops += N * N * ce;                                      // pairwise distances
      gc_flops += flops::matmul(N * T, b.c_in, cfg_.k_partitions * cp);  // feature transform
      gc_flops += cfg_.k_partitions * N * N * cp * T;              // topology products
      gc_flops += flops::matmul(N * T, cfg_.k_partitions * cp, b.c_out);  // output mix
      rows.push_back({prefix + "gc", shape4(T, b.c_out), entry_params(prefix + "gc.") + entry_params(prefix + "norm1."),
                      streams * gc_flops});

      if (b.c_in != b.c_out)
        rows.push_back({prefix + "res1", shape4(T, b.c_out), entry_params(prefix + "res1."),
                        streams * flops::matmul(N * T, b.c_in, b.c_out)});

      const std::size_t cb = b.c_out / 4;
      std::size_t tc_flops = 0;
      tc_flops += 3 * flops::matmul(N * T, b.c_out, cb);  // reductions of branches 1-3
      tc_flops += flops::matmul(N * t_out, b.c_out, cb);  // strided branch-4 reduction
      for (int d = 0; d < 2; ++d) {
        tc_flops += N * t_out * cb * 5;      // depthwise
        tc_flops += N * t_out * cb;          // weighted readout
        tc_flops += 2 * t_out * cb * 5;      // offset + modulation heads
        tc_flops += 5 * N * t_out * cb * cb; // per-tap pointwise mixing
      }
      rows.push_back({prefix + "tc", shape4(t_out, b.c_out), entry_params(prefix + "tc.") + entry_params(prefix + "norm2."),
                      streams * tc_flops});

      if (b.stride > 1)
        rows.push_back({prefix + "res2", shape4(t_out, b.c_out), entry_params(prefix + "res2."),
                        streams * flops::matmul(N * t_out, b.c_out, b.c_out)});
      T = t_out;
    }

    rows.push_back({"classifier", "[" + std::to_string(streams) + "x" + std::to_string(cfg_.n_classes) + "]",
                    entry_params("classifier."),
                    streams * flops::matmul(1, sched.back().c_out, cfg_.n_classes)});
    return rows;
  }

  // -- checkpoint I/O --------------------------------------------------

  void save(const std::string& path) const {
    static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open checkpoint for writing: " + path);
    std::map<std::string, const Tensor*> records;
    for (const auto& [name, e] : params_) records["p:" + name] = &e.value;
    for (const auto& [name, e] : buffers_) records["b:" + name] = &e.value;
    out.write("TSEGCKPT", 8);
    write_u32(out, 1);  // version
    write_u32(out, 0);
    write_u64(out, records.size());
    for (const auto& [name, tensor] : records) {
      write_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(out, static_cast<std::uint32_t>(tensor->rank()));
      for (std::size_t d : tensor->shape()) write_u64(out, d);
      out.write(reinterpret_cast<const char*>(tensor->data()),
                static_cast<std::streamsize>(tensor->size() * sizeof(double)));
    }
    if (!out) throw Error("checkpoint write failed: " + path);
  }

  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "TSEGCKPT", 8) != 0) throw ParseError(path + ": not a checkpoint file");
    const std::uint32_t version = read_u32(in, path);
    if (version != 1) throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version));
    read_u32(in, path);
    const std::uint64_t n_records = read_u64(in, path);
    std::size_t expected = params_.size() + buffers_.size();
    if (n_records != expected)
      throw ParseError(path + ": has " + std::to_string(n_records) + " records, model needs " +
                       std::to_string(expected));
    for (std::uint64_t rec = 0; rec < n_records; ++rec) {
      const std::uint32_t name_len = read_u32(in, path);
      std::string name(name_len, '\0');
      in.read(name.data(), name_len);
      const std::uint32_t rank = read_u32(in, path);
      Shape shape(rank);
      for (std::uint32_t d = 0; d < rank; ++d) shape[d] = read_u64(in, path);
      if (!in) throw ParseError(path + ": truncated record header");
      Tensor* target = nullptr;
      if (name.rfind("p:", 0) == 0 && params_.has(name.substr(2)))
        target = &params_.value(name.substr(2));
      else if (name.rfind("b:", 0) == 0 && buffers_.has(name.substr(2)))
        target = &buffers_.value(name.substr(2));
      if (!target) throw ParseError(path + ": unknown record `" + name + "`");
      if (target->shape() != shape)
        throw ParseError(path + ": record `" + name + "` has shape " + shape_str(shape) + ", model expects " +
                         shape_str(target->shape()));
      in.read(reinterpret_cast<char*>(target->data()), static_cast<std::streamsize>(target->size() * sizeof(double)));
      if (!in) throw ParseError(path + ": truncated record data for `" + name + "`");
    }
  }

 private:
  struct Block {
    BlockSpec spec;
    std::optional<TsegcLayer> gc;
    std::optional<MbdtcLayer> tc;
  };

  void add_norm(const std::string& prefix, std::size_t c) {
    params_.add(prefix + ".gain", Tensor({c}, 1.0));
    params_.add(prefix + ".shift", Tensor({c}));
    buffers_.add(prefix + ".run_mean", Tensor({c}, 0.0));
    buffers_.add(prefix + ".run_var", Tensor({c}, 1.0));
  }

  ag::Var apply_norm(const std::string& prefix, const ag::Var& x, bool train) {
    ag::Var gain = ag::param(params_, prefix + ".gain");
    ag::Var shift = ag::param(params_, prefix + ".shift");
    Tensor& rm = buffers_.value(prefix + ".run_mean");
    Tensor& rv = buffers_.value(prefix + ".run_var");
    if (train) {
      std::vector<double> mean, var;
      ag::Var out = ag::feature_norm_train(x, gain, shift, kNormEps, &mean, &var);
      for (std::size_t c = 0; c < mean.size(); ++c) {
        rm[c] = (1.0 - kNormMomentum) * rm[c] + kNormMomentum * mean[c];
        rv[c] = (1.0 - kNormMomentum) * rv[c] + kNormMomentum * var[c];
      }
      return out;
    }
    return ag::feature_norm_eval(x, gain, shift, rm.vec(), rv.vec(), kNormEps);
  }

  static void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw ParseError(path + ": truncated checkpoint");
    return v;
  }
  static std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw ParseError(path + ": truncated checkpoint");
    return v;
  }

  static constexpr double kNormEps = 1e-5;
  static constexpr double kNormMomentum = 0.1;

  ModelConfig cfg_;
  SkeletonGraph graph_;
  HopTable hop_;
  ParamStore params_;
  ParamStore buffers_;
  std::vector<Block> blocks_;
};

}  // namespace tsegcn
