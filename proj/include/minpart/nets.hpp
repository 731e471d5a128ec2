#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/rng.hpp"

namespace minpart {

enum class NetKind { Linear, MLP, ResNet, ICNN, PerExampleTable };
enum class Activation { Relu, Softplus };

inline std::string to_string(NetKind k) {
  switch (k) {
    case NetKind::Linear: return "linear";
    case NetKind::MLP: return "mlp";
    case NetKind::ResNet: return "resnet";
    case NetKind::ICNN: return "icnn";
    case NetKind::PerExampleTable: return "per_example_table";
  }
  return "?";
}

inline std::string to_string(Activation a) {
  return a == Activation::Relu ? "relu" : "softplus";
}

struct NetSpec {
  NetKind kind = NetKind::Linear;
  int input_dim = 0;
  int output_dim = 0;
  std::vector<int> hidden_dims;
  Activation activation = Activation::Relu;
  int table_size = 0;  // PerExampleTable only
};

inline double softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double activate(Activation a, double z) {
  return a == Activation::Relu ? (z > 0 ? z : 0.0) : softplus(z);
}

inline double activate_deriv(Activation a, double z) {
  return a == Activation::Relu ? (z > 0 ? 1.0 : 0.0) : sigmoid(z);
}

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 1;
  std::size_t size() const { return rows * cols; }
};

/// Flat parameter vector with a named-segment layout. Weight matrices are
/// row-major. Gradients share the layout of the parameters they refer to.
struct ParamVector {
  std::vector<double> values;
  std::vector<ParamSegment> segments;

  std::size_t size() const { return values.size(); }

  std::span<double> seg(std::size_t i) {
    const auto& s = segments[i];
    return {values.data() + s.offset, s.size()};
  }
  std::span<const double> seg(std::size_t i) const {
    const auto& s = segments[i];
    return {values.data() + s.offset, s.size()};
  }
  std::span<double> seg(std::string_view name) {
    return seg(index_of(name));
  }
  std::span<const double> seg(std::string_view name) const {
    return seg(index_of(name));
  }
  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < segments.size(); ++i)
      if (segments[i].name == name) return i;
    throw ShapeMismatch("no parameter segment named '" + std::string(name) + "'");
  }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline ParamVector zeros_like(const ParamVector& p) {
  ParamVector g;
  g.values.assign(p.values.size(), 0.0);
  g.segments = p.segments;
  return g;
}

namespace detail {

inline void push_segment(ParamVector& p, std::string name, std::size_t rows,
                         std::size_t cols) {
  ParamSegment s;
  s.name = std::move(name);
  s.offset = p.values.size();
  s.rows = rows;
  s.cols = cols;
  p.values.resize(p.values.size() + s.size(), 0.0);
  p.segments.push_back(std::move(s));
}

inline void check_net_spec(const NetSpec& spec) {
  if (spec.kind == NetKind::PerExampleTable) {
    if (spec.output_dim != 1)
      throw ShapeMismatch("per-example table must have output_dim = 1");
    if (spec.table_size <= 0)
      throw ShapeMismatch("per-example table needs table_size >= 1");
    return;
  }
  if (spec.input_dim <= 0 || spec.output_dim <= 0)
    throw ShapeMismatch("net requires positive input_dim and output_dim");
  if (spec.kind == NetKind::MLP || spec.kind == NetKind::ResNet ||
      spec.kind == NetKind::ICNN) {
    if (spec.hidden_dims.empty())
      throw ShapeMismatch(to_string(spec.kind) + " requires hidden_dims");
    for (int h : spec.hidden_dims)
      if (h <= 0) throw ShapeMismatch("hidden dims must be positive");
  }
  if (spec.kind == NetKind::ResNet) {
    for (int h : spec.hidden_dims)
      if (h != spec.hidden_dims.front())
        throw ShapeMismatch("resnet blocks share one width");
  }
  if (spec.kind == NetKind::ICNN && spec.output_dim != 1)
    throw ShapeMismatch("icnn must have output_dim = 1");
}

}  // namespace detail

/// Zero-valued parameters with the layout implied by the given NetSpec.
inline ParamVector make_params(const NetSpec& spec) {
  detail::check_net_spec(spec);
  ParamVector p;
  const auto d = static_cast<std::size_t>(spec.input_dim);
  const auto o = static_cast<std::size_t>(spec.output_dim);
  switch (spec.kind) {
    case NetKind::Linear:
      detail::push_segment(p, "W", o, d);
      detail::push_segment(p, "b", o, 1);
      break;
    case NetKind::MLP: {
      std::size_t prev = d;
      for (std::size_t l = 0; l < spec.hidden_dims.size(); ++l) {
        const auto h = static_cast<std::size_t>(spec.hidden_dims[l]);
        detail::push_segment(p, "W" + std::to_string(l), h, prev);
        detail::push_segment(p, "b" + std::to_string(l), h, 1);
        prev = h;
      }
      detail::push_segment(p, "W" + std::to_string(spec.hidden_dims.size()), o, prev);
      detail::push_segment(p, "b" + std::to_string(spec.hidden_dims.size()), o, 1);
      break;
    }
    case NetKind::ResNet: {
      const auto h = static_cast<std::size_t>(spec.hidden_dims.front());
      detail::push_segment(p, "Win", h, d);
      detail::push_segment(p, "bin", h, 1);
      for (std::size_t i = 0; i < spec.hidden_dims.size(); ++i) {
        const std::string t = std::to_string(i);
        detail::push_segment(p, "W1_" + t, h, h);
        detail::push_segment(p, "b1_" + t, h, 1);
        detail::push_segment(p, "W2_" + t, h, h);
        detail::push_segment(p, "b2_" + t, h, 1);
      }
      detail::push_segment(p, "Wout", o, h);
      detail::push_segment(p, "bout", o, 1);
      break;
    }
    case NetKind::ICNN: {
      const auto h = static_cast<std::size_t>(spec.hidden_dims.front());
      detail::push_segment(p, "W1", h, d);
      detail::push_segment(p, "b1", h, 1);
      detail::push_segment(p, "w2", 1, h);  // constrained >= 0
      detail::push_segment(p, "u", 1, d);
      detail::push_segment(p, "c", 1, 1);
      break;
    }
    case NetKind::PerExampleTable:
      detail::push_segment(p, "table", static_cast<std::size_t>(spec.table_size), 1);
      break;
  }
  return p;
}

/// Glorot-uniform weights, zero biases, zero tables. The ICNN's constrained
/// segment is drawn nonnegative so a fresh init already satisfies the
/// convexity constraint.
inline ParamVector init_params(const NetSpec& spec, RngState& rng) {
  ParamVector p = make_params(spec);
  for (std::size_t i = 0; i < p.segments.size(); ++i) {
    const auto& s = p.segments[i];
    const bool is_weight = s.name[0] == 'W' || s.name == "w2" || s.name == "u";
    if (!is_weight) continue;  // biases, tables, c stay 0
    const double a = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
    auto vals = p.seg(i);
    const bool nonneg = spec.kind == NetKind::ICNN && s.name == "w2";
    for (double& v : vals) {
      const double u = rng.next_double();
      v = nonneg ? a * u : a * (2.0 * u - 1.0);
    }
  }
  return p;
}

/// Clamps the ICNN's constrained weight segments at zero. Idempotent.
inline ParamVector project_icnn(const NetSpec& spec, ParamVector params) {
  if (spec.kind != NetKind::ICNN)
    throw WrongKind("project_icnn requires an ICNN spec");
  for (double& v : params.seg("w2"))
    if (v < 0.0) v = 0.0;
  return params;
}

/// Cached forward activations, sufficient to run reverse accumulation for
/// any scalar function of the output.
struct EvalTape {
  NetKind kind = NetKind::Linear;
  std::size_t param_count = 0;
  int example_id = -1;
  std::vector<double> input;
  std::vector<std::vector<double>> cache;  // architecture-specific slots
};

namespace detail {

inline void affine(std::span<const double> W, std::span<const double> b,
                   std::span<const double> x, std::vector<double>& out,
                   std::size_t rows, std::size_t cols) {
  out.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = b[i];
    const double* w = W.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) acc += w[j] * x[j];
    out[i] = acc;
  }
}

// dW += dz x^T, db += dz, dx += W^T dz (dx optional)
inline void affine_backward(std::span<const double> W, std::span<const double> x,
                            std::span<const double> dz, std::span<double> dW,
                            std::span<double> db, double* dx, std::size_t rows,
                            std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double d = dz[i];
    if (d == 0.0) continue;
    double* gw = dW.data() + i * cols;
    const double* w = W.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      gw[j] += d * x[j];
      if (dx) dx[j] += w[j] * d;
    }
    db[i] += d;
  }
}

}  // namespace detail

/// Deterministic forward pass. When tape is non-null it records everything
/// backward needs. Feature-vector entry point; see forward_id for tables.
inline std::vector<double> forward(const NetSpec& spec, const ParamVector& params,
                                   std::span<const double> x, EvalTape* tape = nullptr) {
  if (spec.kind == NetKind::PerExampleTable)
    throw WrongKind("per-example table takes an example id, not features");
  if (static_cast<int>(x.size()) != spec.input_dim)
    throw DimensionMismatch("input has dim " + std::to_string(x.size()) +
                            ", expected " + std::to_string(spec.input_dim));
  if (tape) {
    tape->kind = spec.kind;
    tape->param_count = params.size();
    tape->example_id = -1;
    tape->input.assign(x.begin(), x.end());
    tape->cache.clear();
  }
  switch (spec.kind) {
    case NetKind::Linear: {
      std::vector<double> out;
      detail::affine(params.seg("W"), params.seg("b"), x, out,
                     static_cast<std::size_t>(spec.output_dim),
                     static_cast<std::size_t>(spec.input_dim));
      return out;
    }
    case NetKind::MLP: {
      const std::size_t layers = spec.hidden_dims.size() + 1;
      std::vector<double> a(x.begin(), x.end());
      std::vector<double> z;
      for (std::size_t l = 0; l < layers; ++l) {
        const auto& ws = params.segments[2 * l];
        detail::affine(params.seg(2 * l), params.seg(2 * l + 1), a, z, ws.rows, ws.cols);
        if (tape) tape->cache.push_back(z);  // pre-activation of layer l
        if (l + 1 < layers) {
          a.resize(z.size());
          for (std::size_t i = 0; i < z.size(); ++i) a[i] = activate(spec.activation, z[i]);
          if (tape) tape->cache.push_back(a);  // activation feeding layer l+1
        }
      }
      return z;
    }
    case NetKind::ResNet: {
      const auto h = static_cast<std::size_t>(spec.hidden_dims.front());
      std::vector<double> pin;
      detail::affine(params.seg("Win"), params.seg("bin"), x, pin, h,
                     static_cast<std::size_t>(spec.input_dim));
      if (tape) tape->cache.push_back(pin);
      std::vector<double> z(h);
      for (std::size_t i = 0; i < h; ++i) z[i] = activate(spec.activation, pin[i]);
      std::vector<double> p, a, delta;
      for (std::size_t blk = 0; blk < spec.hidden_dims.size(); ++blk) {
        if (tape) tape->cache.push_back(z);  // block input
        const std::size_t base = 2 + 4 * blk;
        detail::affine(params.seg(base), params.seg(base + 1), z, p, h, h);
        a.resize(h);
        for (std::size_t i = 0; i < h; ++i) a[i] = activate(spec.activation, p[i]);
        if (tape) {
          tape->cache.push_back(p);
          tape->cache.push_back(a);
        }
        detail::affine(params.seg(base + 2), params.seg(base + 3), a, delta, h, h);
        for (std::size_t i = 0; i < h; ++i) z[i] += delta[i];
      }
      if (tape) tape->cache.push_back(z);  // input of the output layer
      std::vector<double> out;
      detail::affine(params.seg("Wout"), params.seg("bout"), z, out,
                     static_cast<std::size_t>(spec.output_dim), h);
      return out;
    }
    case NetKind::ICNN: {
      const auto h = static_cast<std::size_t>(spec.hidden_dims.front());
      std::vector<double> pre;
      detail::affine(params.seg("W1"), params.seg("b1"), x, pre, h,
                     static_cast<std::size_t>(spec.input_dim));
      std::vector<double> a(h);
      for (std::size_t i = 0; i < h; ++i) a[i] = activate(spec.activation, pre[i]);
      if (tape) {
        tape->cache.push_back(pre);
        tape->cache.push_back(a);
      }
      auto w2 = params.seg("w2");
      auto u = params.seg("u");
      double out = params.seg("c")[0];
      for (std::size_t i = 0; i < h; ++i) out += w2[i] * a[i];
      for (std::size_t j = 0; j < x.size(); ++j) out += u[j] * x[j];
      return {out};
    }
    default:
      throw WrongKind("unreachable");
  }
}

/// Forward pass of a per-example table: returns the scalar entry for the id.
inline std::vector<double> forward_id(const NetSpec& spec, const ParamVector& params,
                                      int example_id, EvalTape* tape = nullptr) {
  if (spec.kind != NetKind::PerExampleTable)
    throw WrongKind("forward_id requires a per-example table");
  if (example_id < 0 || example_id >= spec.table_size)
    throw UnknownExampleId("example id " + std::to_string(example_id) +
                           " outside table of size " + std::to_string(spec.table_size));
  if (tape) {
    tape->kind = spec.kind;
    tape->param_count = params.size();
    tape->example_id = example_id;
    tape->input.clear();
    tape->cache.clear();
  }
  return {params.seg("table")[static_cast<std::size_t>(example_id)]};
}

/// Reverse accumulation: grad += d<output, cotangent>/dparams. The tape must
/// come from a matching forward call on the same spec and params.
inline void backward_accum(const NetSpec& spec, const ParamVector& params,
                           const EvalTape& tape, std::span<const double> cotangent,
                           ParamVector& grad) {
  if (tape.kind != spec.kind || tape.param_count != params.size() ||
      grad.size() != params.size())
    throw TapeMismatch("tape does not match spec/params");
  if (static_cast<int>(cotangent.size()) != spec.output_dim)
    throw TapeMismatch("cotangent dim mismatch");
  switch (spec.kind) {
    case NetKind::Linear: {
      detail::affine_backward(params.seg("W"), tape.input, cotangent,
                              grad.seg("W"), grad.seg("b"), nullptr,
                              static_cast<std::size_t>(spec.output_dim),
                              static_cast<std::size_t>(spec.input_dim));
      return;
    }
    case NetKind::MLP: {
      const std::size_t layers = spec.hidden_dims.size() + 1;
      std::vector<double> dz(cotangent.begin(), cotangent.end());
      std::vector<double> da;
      for (std::size_t l = layers; l-- > 0;) {
        const auto& ws = params.segments[2 * l];
        std::span<const double> layer_in =
            l == 0 ? std::span<const double>(tape.input)
                   : std::span<const double>(tape.cache[2 * (l - 1) + 1]);
        da.assign(ws.cols, 0.0);
        detail::affine_backward(params.seg(2 * l), layer_in, dz, grad.seg(2 * l),
                                grad.seg(2 * l + 1), l > 0 ? da.data() : nullptr,
                                ws.rows, ws.cols);
        if (l > 0) {
          const auto& pre = tape.cache[2 * (l - 1)];
          dz.resize(da.size());
          for (std::size_t i = 0; i < da.size(); ++i)
            dz[i] = da[i] * activate_deriv(spec.activation, pre[i]);
        }
      }
      return;
    }
    case NetKind::ResNet: {
      const auto h = static_cast<std::size_t>(spec.hidden_dims.front());
      const std::size_t blocks = spec.hidden_dims.size();
      std::vector<double> dzv(h, 0.0);
      detail::affine_backward(params.seg("Wout"), tape.cache[1 + 3 * blocks],
                              cotangent, grad.seg("Wout"), grad.seg("bout"),
                              dzv.data(), static_cast<std::size_t>(spec.output_dim), h);
      std::vector<double> da(h), dp(h), dz_in(h);
      for (std::size_t blk = blocks; blk-- > 0;) {
        const std::size_t base = 2 + 4 * blk;
        const auto& z_in = tape.cache[1 + 3 * blk];
        const auto& p = tape.cache[2 + 3 * blk];
        const auto& a = tape.cache[3 + 3 * blk];
        std::fill(da.begin(), da.end(), 0.0);
        detail::affine_backward(params.seg(base + 2), a, dzv, grad.seg(base + 2),
                                grad.seg(base + 3), da.data(), h, h);
        for (std::size_t i = 0; i < h; ++i)
          dp[i] = da[i] * activate_deriv(spec.activation, p[i]);
        std::fill(dz_in.begin(), dz_in.end(), 0.0);
        detail::affine_backward(params.seg(base), z_in, dp, grad.seg(base),
                                grad.seg(base + 1), dz_in.data(), h, h);
        for (std::size_t i = 0; i < h; ++i) dzv[i] += dz_in[i];  // identity skip
      }
      const auto& pin = tape.cache[0];
      for (std::size_t i = 0; i < h; ++i)
        dp[i] = dzv[i] * activate_deriv(spec.activation, pin[i]);
      detail::affine_backward(params.seg("Win"), tape.input, dp, grad.seg("Win"),
                              grad.seg("bin"), nullptr, h,
                              static_cast<std::size_t>(spec.input_dim));
      return;
    }
    case NetKind::ICNN: {
      const auto h = static_cast<std::size_t>(spec.hidden_dims.front());
      const double s = cotangent[0];
      const auto& pre = tape.cache[0];
      const auto& a = tape.cache[1];
      auto w2 = params.seg("w2");
      auto gw2 = grad.seg("w2");
      std::vector<double> dp(h);
      for (std::size_t i = 0; i < h; ++i) {
        gw2[i] += s * a[i];
        dp[i] = s * w2[i] * activate_deriv(spec.activation, pre[i]);
      }
      detail::affine_backward(params.seg("W1"), tape.input, dp, grad.seg("W1"),
                              grad.seg("b1"), nullptr, h,
                              static_cast<std::size_t>(spec.input_dim));
      auto gu = grad.seg("u");
      for (std::size_t j = 0; j < tape.input.size(); ++j) gu[j] += s * tape.input[j];
      grad.seg("c")[0] += s;
      return;
    }
    case NetKind::PerExampleTable: {
      if (tape.example_id < 0)
        throw TapeMismatch("table tape lacks an example id");
      grad.seg("table")[static_cast<std::size_t>(tape.example_id)] += cotangent[0];
      return;
    }
  }
}

inline ParamVector backward(const NetSpec& spec, const ParamVector& params,
                            const EvalTape& tape, std::span<const double> cotangent) {
  ParamVector grad = zeros_like(params);
  backward_accum(spec, params, tape, cotangent, grad);
  return grad;
}

}  // namespace minpart
