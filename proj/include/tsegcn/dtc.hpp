#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tsegcn/ops.hpp"

namespace tsegcn {

/// Learned per-frame sampling offsets and modulation weights, both [B,T',R].
struct OffsetField {
  Tensor offsets;
  Tensor modulation;
};

struct KernelConfig {
  std::size_t kernel = 5;
  std::size_t dilation = 1;
  std::size_t stride = 1;
};

/// Sample one kernel tap at output frame t_out from x [B,N,T,C]:
///   q = clamp(t_out*stride + (r - (R-1)/2)*dilation + offsets[b,t_out,r], 0, T-1)
/// linear interpolation between floor(q) and ceil(q), scaled by the
/// modulation weight. Returns [B,N,C].
inline Tensor deform_sample(const Tensor& x, std::size_t t_out, std::size_t r, const OffsetField& field,
                            const KernelConfig& kc) {
  if (x.rank() != 4) throw DimensionError("deform_sample: expected [B,N,T,C], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), N = x.dim(1), T = x.dim(2), C = x.dim(3);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(kc.kernel - 1) / 2;
  const double base = static_cast<double>(t_out * kc.stride) +
                      static_cast<double>((static_cast<std::ptrdiff_t>(r) - half) *
                                          static_cast<std::ptrdiff_t>(kc.dilation));
  Tensor out({B, N, C});
  for (std::size_t b = 0; b < B; ++b) {
    double q = base + field.offsets.at(b, t_out, r);
    q = std::min(std::max(q, 0.0), static_cast<double>(T - 1));
    std::size_t lo = static_cast<std::size_t>(std::floor(q));
    if (lo + 1 >= T) lo = (T > 1) ? T - 2 : 0;
    const std::size_t hi = (T > 1) ? lo + 1 : 0;
    const double f = q - static_cast<double>(lo);
    const double m = field.modulation.at(b, t_out, r);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        out.at(b, n, c) = m * ((1.0 - f) * x.at(b, n, lo, c) + f * x.at(b, n, hi, c));
  }
  return out;
}

struct DtcConfig {
  std::size_t n_joints = 0;
  std::size_t channels = 0;
  std::size_t kernel = 5;
  std::size_t dilation = 1;
  std::size_t stride = 1;
  /// Modulation input: the graph readout by default, or the offset rows.
  bool modulation_from_offsets = false;
};

/// Deformable temporal convolution. Pipeline: depthwise conv (stride applied
/// here) -> weighted graph readout -> per-frame offset/modulation heads ->
/// deformable resampling of the depthwise output on a centered tap grid ->
/// per-tap pointwise mix, summed over taps.
///
/// Offset and modulation projections start at zero, so a fresh layer is
/// exactly a dilated depthwise-separable convolution.
class DtcLayer {
 public:
  DtcLayer(ParamStore& ps, std::string prefix, const DtcConfig& cfg, Rng& rng) : prefix_(std::move(prefix)), cfg_(cfg) {
    if (cfg_.kernel < 1 || cfg_.dilation < 1 || cfg_.stride < 1)
      throw ConfigError(prefix_ + ": kernel, dilation and stride must be >= 1");
    const std::size_t C = cfg_.channels, R = cfg_.kernel;
    const double dw_bound = 1.0 / std::sqrt(static_cast<double>(R));
    const double tap_bound = 1.0 / std::sqrt(static_cast<double>(R * C));
    ps.add(name("depthwise_w"), rng.uniform_tensor({C, R}, -dw_bound, dw_bound));
    ps.add(name("readout_w"), Tensor({cfg_.n_joints}, 1.0));
    ps.add(name("offset_w"), Tensor({C, R}));  // zero init
    ps.add(name("offset_b"), Tensor({R}));
    ps.add(name("mod_w"), Tensor({cfg_.modulation_from_offsets ? R : C, R}));  // zero init
    ps.add(name("mod_b"), Tensor({R}));
    for (std::size_t r = 0; r < R; ++r)
      ps.add(name("tap_w" + std::to_string(r)), rng.uniform_tensor({C, C}, -tap_bound, tap_bound));
  }

  const DtcConfig& config() const { return cfg_; }
  std::string name(const std::string& leaf) const { return prefix_ + "." + leaf; }

  /// x: [B,N,T,C] -> [B,N,ceil(T/stride),C].
  ag::Var forward(ParamStore& ps, const ag::Var& x, OffsetField* probe = nullptr) const {
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.dim(3) != cfg_.channels || xv.dim(1) != cfg_.n_joints)
      throw DimensionError(prefix_ + ": input " + shape_str(xv.shape()) + " does not match layer config");
    if (xv.dim(2) < 1) throw DimensionError(prefix_ + ": input must have at least one frame");
    const std::size_t R = cfg_.kernel;

    ag::Var y = ag::depthwise_time_conv(x, ag::param(ps, name("depthwise_w")), cfg_.stride, cfg_.dilation);
    ag::Var readout = ag::weighted_readout(y, ag::param(ps, name("readout_w")));

    ag::Var offset_b = ag::param(ps, name("offset_b"));
    ag::Var offsets = ag::linear(readout, ag::param(ps, name("offset_w")), &offset_b);
    ag::Var mod_b = ag::param(ps, name("mod_b"));
    const ag::Var& mod_src = cfg_.modulation_from_offsets ? offsets : readout;
    ag::Var modulation = ag::add_const(ag::tanh_op(ag::linear(mod_src, ag::param(ps, name("mod_w")), &mod_b)), 1.0);

    if (probe) {
      probe->offsets = offsets.value();
      probe->modulation = modulation.value();
    }

    // Sampling runs on the already-strided depthwise output, one centered
    // tap grid per output frame.
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(R - 1) / 2;
    ag::Var out;
    for (std::size_t r = 0; r < R; ++r) {
      const std::ptrdiff_t grid = (static_cast<std::ptrdiff_t>(r) - half) * static_cast<std::ptrdiff_t>(cfg_.dilation);
      ag::Var sampled = ag::deform_sample_tap(y, offsets, modulation, r, grid);
      ag::Var mixed = ag::linear(sampled, ag::param(ps, name("tap_w" + std::to_string(r))));
      out = out.defined() ? ag::add(out, mixed) : mixed;
    }
    return out;
  }

 private:
  std::string prefix_;
  DtcConfig cfg_;
};

struct MbdtcConfig {
  std::size_t n_joints = 0;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t stride = 1;
  std::size_t kernel = 5;
  bool modulation_from_offsets = false;

  std::size_t branch_width() const {
    if (c_out % 4 != 0)
      throw ConfigError("mbdtc: c_out=" + std::to_string(c_out) + " must be divisible by the 4 branches");
    return c_out / 4;
  }
};

/// Per-branch offset fields captured during a probed forward pass.
struct MbdtcProbe {
  OffsetField dilation1;
  OffsetField dilation2;
};

/// Four-branch temporal block: two deformable temporal convolutions
/// (dilations 1 and 2), a temporal max-pool branch, and a strided 1x1
/// branch. Every branch starts with a 1x1 channel reduction followed by
/// GeLU; outputs are concatenated along channels.
class MbdtcLayer {
 public:
  MbdtcLayer(ParamStore& ps, std::string prefix, const MbdtcConfig& cfg, Rng& rng)
      : prefix_(std::move(prefix)), cfg_(cfg) {
    const std::size_t cb = cfg_.branch_width();
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.c_in));
    for (int b = 1; b <= 4; ++b) {
      ps.add(name("b" + std::to_string(b) + ".reduce_w"), rng.uniform_tensor({cfg_.c_in, cb}, -bound, bound));
      ps.add(name("b" + std::to_string(b) + ".reduce_b"), Tensor({cb}));
    }
    DtcConfig d1{cfg_.n_joints, cb, cfg_.kernel, 1, cfg_.stride, cfg_.modulation_from_offsets};
    DtcConfig d2{cfg_.n_joints, cb, cfg_.kernel, 2, cfg_.stride, cfg_.modulation_from_offsets};
    dtc1_.emplace(ps, name("b1.dtc"), d1, rng);
    dtc2_.emplace(ps, name("b2.dtc"), d2, rng);
  }

  const MbdtcConfig& config() const { return cfg_; }
  const DtcLayer& dtc_dilation1() const { return *dtc1_; }
  const DtcLayer& dtc_dilation2() const { return *dtc2_; }
  std::string name(const std::string& leaf) const { return prefix_ + "." + leaf; }

  /// x: [B,N,T,C_in] -> [B,N,ceil(T/stride),C_out].
  ag::Var forward(ParamStore& ps, const ag::Var& x, MbdtcProbe* probe = nullptr) const {
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.dim(3) != cfg_.c_in || xv.dim(1) != cfg_.n_joints)
      throw DimensionError(prefix_ + ": input " + shape_str(xv.shape()) + " does not match layer config");

    auto reduce = [&](int b, const ag::Var& in) {
      ag::Var bias = ag::param(ps, name("b" + std::to_string(b) + ".reduce_b"));
      return ag::gelu(ag::linear(in, ag::param(ps, name("b" + std::to_string(b) + ".reduce_w")), &bias));
    };

    ag::Var out1 = dtc1_->forward(ps, reduce(1, x), probe ? &probe->dilation1 : nullptr);
    ag::Var out2 = dtc2_->forward(ps, reduce(2, x), probe ? &probe->dilation2 : nullptr);
    ag::Var out3 = ag::maxpool_time(reduce(3, x), 3, cfg_.stride);
    ag::Var out4 = reduce(4, ag::subsample_time(x, cfg_.stride));
    return ag::concat_last({out1, out2, out3, out4});
  }

 private:
  std::string prefix_;
  MbdtcConfig cfg_;
  std::optional<DtcLayer> dtc1_;
  std::optional<DtcLayer> dtc2_;
};

}  // namespace tsegcn
