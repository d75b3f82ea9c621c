#include "roaforge/verify.hpp"

#include "roaforge/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace roaforge::verify {

// ---------------------------------------------------------------------------
// SymTable
// ---------------------------------------------------------------------------

namespace {

std::uint64_t mix64(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

std::uint64_t node_hash(const SymNode& n) {
  std::uint64_t h = static_cast<std::uint64_t>(n.kind);
  std::uint64_t bits;
  std::memcpy(&bits, &n.value, sizeof(bits));
  h = mix64(h, bits);
  h = mix64(h, static_cast<std::uint64_t>(n.var) + 1);
  h = mix64(h, static_cast<std::uint64_t>(n.a) + 1);
  h = mix64(h, static_cast<std::uint64_t>(n.b) + 1);
  h = mix64(h, static_cast<std::uint64_t>(n.c) + 1);
  return h;
}

bool node_equal(const SymNode& x, const SymNode& y) {
  return x.kind == y.kind && x.var == y.var && x.a == y.a && x.b == y.b && x.c == y.c &&
         std::memcmp(&x.value, &y.value, sizeof(double)) == 0;
}

}  // namespace

int SymTable::intern(SymNode n) {
  const std::uint64_t h = node_hash(n);
  auto& bucket = buckets_[h];
  for (int id : bucket) {
    if (node_equal(nodes_[static_cast<std::size_t>(id)], n)) return id;
  }
  nodes_.push_back(n);
  const int id = static_cast<int>(nodes_.size()) - 1;
  bucket.push_back(id);
  return id;
}

int SymTable::constant(double v) {
  SymNode n;
  n.kind = SymKind::constant;
  n.value = v;
  return intern(n);
}

int SymTable::variable(int index) {
  SymNode n;
  n.kind = SymKind::variable;
  n.var = index;
  return intern(n);
}

int SymTable::add(int a, int b) {
  const SymNode& na = node(a);
  const SymNode& nb = node(b);
  if (na.kind == SymKind::constant && nb.kind == SymKind::constant)
    return constant(na.value + nb.value);
  if (na.kind == SymKind::constant && na.value == 0.0) return b;
  if (nb.kind == SymKind::constant && nb.value == 0.0) return a;
  SymNode n;
  n.kind = SymKind::add;
  n.a = a;
  n.b = b;
  return intern(n);
}

int SymTable::sub(int a, int b) {
  const SymNode& na = node(a);
  const SymNode& nb = node(b);
  if (na.kind == SymKind::constant && nb.kind == SymKind::constant)
    return constant(na.value - nb.value);
  if (nb.kind == SymKind::constant && nb.value == 0.0) return a;
  if (na.kind == SymKind::constant && na.value == 0.0) return neg(b);
  SymNode n;
  n.kind = SymKind::sub;
  n.a = a;
  n.b = b;
  return intern(n);
}

int SymTable::mul(int a, int b) {
  const SymNode& na = node(a);
  const SymNode& nb = node(b);
  if (na.kind == SymKind::constant && nb.kind == SymKind::constant)
    return constant(na.value * nb.value);
  if (na.kind == SymKind::constant) {
    if (na.value == 0.0) return constant(0.0);
    if (na.value == 1.0) return b;
  }
  if (nb.kind == SymKind::constant) {
    if (nb.value == 0.0) return constant(0.0);
    if (nb.value == 1.0) return a;
  }
  SymNode n;
  n.kind = SymKind::mul;
  n.a = a;
  n.b = b;
  return intern(n);
}

int SymTable::div(int a, int b) {
  const SymNode& na = node(a);
  const SymNode& nb = node(b);
  if (nb.kind == SymKind::constant && nb.value == 1.0) return a;
  if (na.kind == SymKind::constant && na.value == 0.0) return constant(0.0);
  if (na.kind == SymKind::constant && nb.kind == SymKind::constant && nb.value != 0.0)
    return constant(na.value / nb.value);
  SymNode n;
  n.kind = SymKind::div;
  n.a = a;
  n.b = b;
  return intern(n);
}

int SymTable::neg(int a) {
  const SymNode& na = node(a);
  if (na.kind == SymKind::constant) return constant(-na.value);
  SymNode n;
  n.kind = SymKind::neg;
  n.a = a;
  return intern(n);
}

int SymTable::exp_fn(int a) {
  const SymNode& na = node(a);
  if (na.kind == SymKind::constant) return constant(std::exp(na.value));
  SymNode n;
  n.kind = SymKind::exp_fn;
  n.a = a;
  return intern(n);
}

int SymTable::sin_fn(int a) {
  const SymNode& na = node(a);
  if (na.kind == SymKind::constant) return constant(std::sin(na.value));
  SymNode n;
  n.kind = SymKind::sin_fn;
  n.a = a;
  return intern(n);
}

int SymTable::cos_fn(int a) {
  const SymNode& na = node(a);
  if (na.kind == SymKind::constant) return constant(std::cos(na.value));
  SymNode n;
  n.kind = SymKind::cos_fn;
  n.a = a;
  return intern(n);
}

int SymTable::ite(int cond, int then_e, int else_e) {
  SymNode n;
  n.kind = SymKind::ite;
  n.a = cond;
  n.b = then_e;
  n.c = else_e;
  return intern(n);
}

int SymTable::le(int a, int b) {
  SymNode n;
  n.kind = SymKind::le;
  n.a = a;
  n.b = b;
  return intern(n);
}

int SymTable::ge(int a, int b) {
  SymNode n;
  n.kind = SymKind::ge;
  n.a = a;
  n.b = b;
  return intern(n);
}

int SymTable::and_op(int a, int b) {
  SymNode n;
  n.kind = SymKind::and_op;
  n.a = a;
  n.b = b;
  return intern(n);
}

int SymTable::tanh_via_exp(int y) {
  const int e = exp_fn(mul(constant(-2.0), y));
  return div(sub(constant(1.0), e), add(constant(1.0), e));
}

double SymTable::eval(int id, const Vec& x) const {
  std::vector<double> values(nodes_.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<char> done(nodes_.size(), 0);
  // Iterative post-order over the DAG restricted to reachable ids.
  std::vector<int> stack{id};
  while (!stack.empty()) {
    const int cur = stack.back();
    if (done[static_cast<std::size_t>(cur)]) {
      stack.pop_back();
      continue;
    }
    const SymNode& n = nodes_[static_cast<std::size_t>(cur)];
    bool ready = true;
    for (int child : {n.a, n.b, n.c}) {
      if (child >= 0 && !done[static_cast<std::size_t>(child)]) {
        stack.push_back(child);
        ready = false;
      }
    }
    if (!ready) continue;
    stack.pop_back();
    double v = 0.0;
    auto val = [&](int i) { return values[static_cast<std::size_t>(i)]; };
    switch (n.kind) {
      case SymKind::constant: v = n.value; break;
      case SymKind::variable: v = x(n.var); break;
      case SymKind::add: v = val(n.a) + val(n.b); break;
      case SymKind::sub: v = val(n.a) - val(n.b); break;
      case SymKind::mul: v = val(n.a) * val(n.b); break;
      case SymKind::div: v = val(n.a) / val(n.b); break;
      case SymKind::neg: v = -val(n.a); break;
      case SymKind::exp_fn: v = std::exp(val(n.a)); break;
      case SymKind::sin_fn: v = std::sin(val(n.a)); break;
      case SymKind::cos_fn: v = std::cos(val(n.a)); break;
      case SymKind::ite: v = (val(n.a) != 0.0) ? val(n.b) : val(n.c); break;
      case SymKind::le: v = (val(n.a) <= val(n.b)) ? 1.0 : 0.0; break;
      case SymKind::ge: v = (val(n.a) >= val(n.b)) ? 1.0 : 0.0; break;
      case SymKind::and_op: v = (val(n.a) != 0.0 && val(n.b) != 0.0) ? 1.0 : 0.0; break;
    }
    values[static_cast<std::size_t>(cur)] = v;
    done[static_cast<std::size_t>(cur)] = 1;
  }
  return values[static_cast<std::size_t>(id)];
}

int SymTable::derivative(int id, int var) {
  const std::uint64_t key =
      (static_cast<std::uint64_t>(static_cast<std::uint32_t>(id)) << 32) |
      static_cast<std::uint32_t>(var);
  auto it = deriv_memo_.find(key);
  if (it != deriv_memo_.end()) return it->second;

  const SymNode n = node(id);  // copy: interning below may reallocate
  int result;
  switch (n.kind) {
    case SymKind::constant: result = constant(0.0); break;
    case SymKind::variable: result = constant(n.var == var ? 1.0 : 0.0); break;
    case SymKind::add: result = add(derivative(n.a, var), derivative(n.b, var)); break;
    case SymKind::sub: result = sub(derivative(n.a, var), derivative(n.b, var)); break;
    case SymKind::mul:
      result = add(mul(derivative(n.a, var), n.b), mul(n.a, derivative(n.b, var)));
      break;
    case SymKind::div: {
      const int da = derivative(n.a, var);
      const int db = derivative(n.b, var);
      result = div(sub(mul(da, n.b), mul(n.a, db)), mul(n.b, n.b));
      break;
    }
    case SymKind::neg: result = neg(derivative(n.a, var)); break;
    case SymKind::exp_fn: result = mul(id, derivative(n.a, var)); break;
    case SymKind::sin_fn: result = mul(cos_fn(n.a), derivative(n.a, var)); break;
    case SymKind::cos_fn: result = neg(mul(sin_fn(n.a), derivative(n.a, var))); break;
    case SymKind::ite:
      result = ite(n.a, derivative(n.b, var), derivative(n.c, var));
      break;
    default:
      result = constant(0.0);  // comparisons are piecewise constant
      break;
  }
  deriv_memo_.emplace(key, result);
  return result;
}

// ---------------------------------------------------------------------------
// Symbolic model
// ---------------------------------------------------------------------------

namespace {

/// Symbolic forward pass of a dense net given assembled numeric weights.
std::vector<int> symbolic_dense(SymTable& t, const netcore::DenseNetSpec& spec,
                                const netcore::ParamStore& params, const std::string& prefix,
                                const std::vector<int>& inputs) {
  std::vector<int> h = inputs;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const Mat w = netcore::assembled_weight(spec, params, prefix, l);
    const bool with_bias = !spec.constrained && spec.bias[static_cast<std::size_t>(l)];
    Vec bias;
    if (with_bias) bias = params.at(prefix + ".L" + std::to_string(l) + ".b").col(0);
    std::vector<int> z(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      int acc = t.constant(with_bias ? bias(r) : 0.0);
      for (Eigen::Index cidx = 0; cidx < w.cols(); ++cidx) {
        acc = t.add(acc, t.mul(t.constant(w(r, cidx)), h[static_cast<std::size_t>(cidx)]));
      }
      z[static_cast<std::size_t>(r)] = acc;
    }
    const bool is_tanh = spec.activations[static_cast<std::size_t>(l)] ==
                         netcore::Activation::tanh;
    for (auto& e : z) {
      if (is_tanh) e = t.tanh_via_exp(e);
    }
    h = std::move(z);
  }
  return h;
}

void check_width(const netcore::DenseNetSpec& spec, int cap, const std::string& what) {
  for (int d : spec.layer_dims) {
    if (d > cap) {
      throw std::invalid_argument("SMT export refused: " + what + " width " +
                                  std::to_string(d) + " exceeds the cap " +
                                  std::to_string(cap) +
                                  "; export is intended for reduced networks");
    }
  }
}

/// Nominal drift and gain column as symbolic expressions.
void symbolic_nominal(SymTable& t, const dynamics::SystemSpec& spec,
                      const std::vector<int>& x, std::vector<int>& f0, std::vector<int>& g0) {
  auto P = [&](const std::string& k) { return spec.params.at(k); };
  if (spec.name == "pendulum") {
    const double g = P("gravity"), ln = P("l_nom"), mn = P("m_nom");
    f0 = {x[1], t.mul(t.constant(g / ln), t.sin_fn(x[0]))};
    g0 = {t.constant(0.0), t.constant(1.0 / (mn * ln * ln))};
  } else if (spec.name == "strict_feedback") {
    f0 = {t.mul(t.constant(P("e1_nom")), x[1]), t.mul(t.constant(P("e2_nom")), x[2]),
          t.mul(t.constant(P("e3_nom")), t.mul(x[0], x[0]))};
    g0 = {t.constant(0.0), t.constant(0.0), t.constant(P("e4_nom"))};
  } else if (spec.name == "cartpole") {
    const double M = P("M_nom"), m = P("m_nom"), l = P("l_nom"), bc = P("b_c_nom");
    const double g = P("gravity");
    const int st = t.sin_fn(x[0]);
    const int ct = t.cos_fn(x[0]);
    const int den = t.sub(t.constant(M + m), t.mul(t.constant(m), t.mul(ct, ct)));
    // vdot = (u + m sin(th) (g cos(th) - l w^2) - bc v) / den, affine in u.
    const int vdot_drift =
        t.div(t.sub(t.mul(t.constant(m),
                          t.mul(st, t.sub(t.mul(t.constant(g), ct),
                                          t.mul(t.constant(l), t.mul(x[1], x[1]))))),
                    t.mul(t.constant(bc), x[3])),
              den);
    const int vdot_gain = t.div(t.constant(1.0), den);
    const int wdot_drift =
        t.div(t.add(t.mul(t.constant(g), st), t.mul(vdot_drift, ct)), t.constant(l));
    const int wdot_gain = t.div(t.mul(vdot_gain, ct), t.constant(l));
    f0 = {x[1], wdot_drift, x[3], vdot_drift};
    g0 = {t.constant(0.0), wdot_gain, t.constant(0.0), vdot_gain};
  } else {
    throw std::invalid_argument("no symbolic nominal model for system: " + spec.name);
  }
}

}  // namespace

SymbolicModel build_symbolic_model(const lyapnet::LyapunovNet& lyap,
                                   const lyapnet::ControllerNet& ctrl,
                                   const lyapnet::ResidualDynamics& res,
                                   const netcore::ParamStore& params,
                                   const dynamics::SystemSpec& spec,
                                   const ExportLimits& limits) {
  require(ctrl.m == 1, "symbolic export supports single-input plants");
  if (lyap.phi) check_width(*lyap.phi, limits.max_phi_width, "phi");
  check_width(ctrl.psi, limits.max_net_width, "psi");
  check_width(res.f_net, limits.max_net_width, "f residual");
  if (res.g_net) check_width(*res.g_net, limits.max_net_width, "g residual");

  SymbolicModel model;
  SymTable& t = model.table;
  const int n = spec.n;
  std::vector<int> x(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = t.variable(i);

  int norm_sq = t.constant(0.0);
  for (int i = 0; i < n; ++i) {
    norm_sq = t.add(norm_sq, t.mul(x[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(i)]));
  }
  model.norm_sq_expr = norm_sq;

  // V = x^T (M M^T + gamma I) x + |phi(x)|^2.
  const Mat m_lower = lyap.unpack_m(params);
  const Mat a_mat = m_lower * m_lower.transpose() + lyap.gamma * Mat::Identity(n, n);
  int v = t.constant(0.0);
  for (int i = 0; i < n; ++i) {
    int row = t.constant(0.0);
    for (int j = 0; j < n; ++j) {
      row = t.add(row, t.mul(t.constant(a_mat(i, j)), x[static_cast<std::size_t>(j)]));
    }
    v = t.add(v, t.mul(x[static_cast<std::size_t>(i)], row));
  }
  if (lyap.phi) {
    const auto phi_out = symbolic_dense(t, *lyap.phi, params, "lyap.phi", x);
    for (int e : phi_out) v = t.add(v, t.mul(e, e));
  }
  model.v_expr = v;

  // u = LS(u0 + psi).
  int y = t.constant(0.0);
  for (int j = 0; j < n; ++j) {
    y = t.add(y, t.mul(t.constant(-ctrl.k_gain(0, j)), x[static_cast<std::size_t>(j)]));
  }
  const auto psi_out = symbolic_dense(t, ctrl.psi, params, "ctrl.psi", x);
  y = t.add(y, psi_out[0]);
  const double slope_a = params.at("ctrl.m_a")(0, 0);
  const double slope_b = params.at("ctrl.m_b")(0, 0);
  const int lo = t.add(t.constant(ctrl.a),
                       t.mul(t.constant(slope_a), t.sub(y, t.constant(ctrl.a))));
  const int hi = t.add(t.constant(ctrl.b),
                       t.mul(t.constant(slope_b), t.sub(y, t.constant(ctrl.b))));
  model.u_expr = t.ite(t.le(y, t.constant(ctrl.a)), lo,
                       t.ite(t.ge(y, t.constant(ctrl.b)), hi, y));

  // fhat + ghat u with residual corrections.
  std::vector<int> f0, g0;
  symbolic_nominal(t, spec, x, f0, g0);
  const auto f_res = symbolic_dense(t, res.f_net, params, "res.f", x);
  for (std::size_t k = 0; k < res.f_mask.size(); ++k) {
    auto& slot = f0[static_cast<std::size_t>(res.f_mask[k])];
    slot = t.add(slot, f_res[k]);
  }
  if (res.g_shape == dynamics::ResidualGShape::scalar) {
    const int s = t.constant(params.at("res.g.scalar")(0, 0));
    for (int row : res.g_mask) {
      g0[static_cast<std::size_t>(row)] = t.add(g0[static_cast<std::size_t>(row)], s);
    }
  } else {
    const auto g_res = symbolic_dense(t, *res.g_net, params, "res.g", x);
    for (std::size_t k = 0; k < res.g_mask.size(); ++k) {
      auto& slot = g0[static_cast<std::size_t>(res.g_mask[k])];
      slot = t.add(slot, g_res[k]);
    }
  }

  int vdot = t.constant(0.0);
  for (int i = 0; i < n; ++i) {
    const int dv = t.derivative(model.v_expr, i);
    const int field =
        t.add(f0[static_cast<std::size_t>(i)], t.mul(g0[static_cast<std::size_t>(i)], model.u_expr));
    vdot = t.add(vdot, t.mul(dv, field));
  }
  model.vdot_expr = vdot;
  return model;
}

// ---------------------------------------------------------------------------
// Grid falsifier
// ---------------------------------------------------------------------------

FalsificationResult falsify_grid(const lyapnet::LyapunovEval& lyap,
                                 const lyapnet::ControllerEval& ctrl,
                                 const lyapnet::ResidualEval& res,
                                 const dynamics::SystemSpec& spec, double c, double zeta,
                                 double kappa, double resolution) {
  require(zeta > 0.0, "falsifier needs zeta > 0");
  require(resolution > 0.0, "falsifier needs a positive resolution");

  FalsificationResult result;
  result.resolution = resolution;
  result.zeta = zeta;
  result.level_c = c;
  result.margin_min = std::numeric_limits<double>::infinity();

  std::vector<int> dims(static_cast<std::size_t>(spec.n));
  std::vector<double> spacing(static_cast<std::size_t>(spec.n));
  std::size_t total = 1;
  for (int d = 0; d < spec.n; ++d) {
    const auto& [dlo, dhi] = spec.state_box[static_cast<std::size_t>(d)];
    const int nd = std::max(2, static_cast<int>(std::ceil((dhi - dlo) / resolution)) + 1);
    dims[static_cast<std::size_t>(d)] = nd;
    spacing[static_cast<std::size_t>(d)] = (dhi - dlo) / static_cast<double>(nd - 1);
    total *= static_cast<std::size_t>(nd);
  }

  constexpr std::size_t kChunk = 8192;
  std::vector<int> idx(static_cast<std::size_t>(spec.n), 0);
  std::size_t done = 0;
  while (done < total) {
    const std::size_t count = std::min(kChunk, total - done);
    Mat X(spec.n, static_cast<Eigen::Index>(count));
    for (std::size_t k = 0; k < count; ++k) {
      for (int d = 0; d < spec.n; ++d) {
        X(d, static_cast<Eigen::Index>(k)) =
            spec.state_box[static_cast<std::size_t>(d)].first +
            spacing[static_cast<std::size_t>(d)] * static_cast<double>(idx[static_cast<std::size_t>(d)]);
      }
      for (int d = spec.n - 1; d >= 0; --d) {
        if (++idx[static_cast<std::size_t>(d)] < dims[static_cast<std::size_t>(d)]) break;
        idx[static_cast<std::size_t>(d)] = 0;
      }
    }
    const Eigen::RowVectorXd v = lyap.value_batch(X);
    const Eigen::RowVectorXd vdot = lyapnet::vdot_hat_batch(lyap, ctrl, res, spec, X);
    for (std::size_t k = 0; k < count; ++k) {
      const auto col = X.col(static_cast<Eigen::Index>(k));
      const double nsq = col.squaredNorm();
      if (nsq < zeta * zeta) continue;
      if (v(static_cast<Eigen::Index>(k)) > c) continue;
      ++result.checked_points;
      const double violation = vdot(static_cast<Eigen::Index>(k)) + kappa * nsq;
      result.margin_min = std::min(result.margin_min, -violation);
      if (violation >= 0.0) {
        result.counterexample = col;
        return result;
      }
    }
    done += count;
  }
  if (result.checked_points == 0) result.margin_min = 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// SMT-LIB2 writing
// ---------------------------------------------------------------------------

std::string smt_literal(double v) {
  require(std::isfinite(v), "cannot emit a non-finite SMT literal");
  if (std::signbit(v) && v != 0.0) return "(- " + smt_literal(-v) + ")";
  if (v == 0.0) return "0.0";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.16e", v);
  // buf looks like d.dddddddddddddddde[+-]XX; rebuild positional notation.
  const char* epos = std::strchr(buf, 'e');
  std::string mantissa(buf, static_cast<std::size_t>(epos - buf));
  const int exponent = std::atoi(epos + 1);
  std::string digits;
  for (char ch : mantissa) {
    if (ch != '.') digits.push_back(ch);
  }
  while (digits.size() > 1 && digits.back() == '0') digits.pop_back();
  const int point = exponent + 1;  // digits represent 0.DIGITS * 10^point
  std::string out;
  if (point <= 0) {
    out = "0." + std::string(static_cast<std::size_t>(-point), '0') + digits;
  } else if (static_cast<std::size_t>(point) >= digits.size()) {
    out = digits + std::string(static_cast<std::size_t>(point) - digits.size(), '0') + ".0";
  } else {
    out = digits.substr(0, static_cast<std::size_t>(point)) + "." +
          digits.substr(static_cast<std::size_t>(point));
  }
  return out;
}

namespace {

/// Renders one root with nested lets for shared non-trivial subexpressions.
class SmtEmitter {
 public:
  SmtEmitter(const SymTable& t, const std::vector<std::string>& var_names)
      : t_(t), vars_(var_names) {}

  std::string render_root(int root, int& let_counter) {
    refs_.clear();
    names_.clear();
    count(root);
    std::vector<int> lets;
    for (const auto& [id, cnt] : refs_) {
      const SymKind k = t_.node(id).kind;
      if (cnt >= 2 && k != SymKind::constant && k != SymKind::variable) lets.push_back(id);
    }
    std::sort(lets.begin(), lets.end());  // ids are topologically ordered
    std::string out;
    for (int id : lets) {
      const std::string name = "t" + std::to_string(let_counter++);
      out += "(let ((" + name + " " + render(id) + ")) ";
      names_[id] = name;
    }
    out += emit(root);
    out += std::string(lets.size(), ')');
    return out;
  }

 private:
  void count(int id) {
    if (++refs_[id] > 1) return;
    const SymNode& n = t_.node(id);
    for (int child : {n.a, n.b, n.c}) {
      if (child >= 0) count(child);
    }
  }

  std::string emit(int id) {
    auto it = names_.find(id);
    if (it != names_.end()) return it->second;
    return render(id);
  }

  std::string render(int id) {
    const SymNode& n = t_.node(id);
    switch (n.kind) {
      case SymKind::constant: return smt_literal(n.value);
      case SymKind::variable: return vars_[static_cast<std::size_t>(n.var)];
      case SymKind::add: return "(+ " + emit(n.a) + " " + emit(n.b) + ")";
      case SymKind::sub: return "(- " + emit(n.a) + " " + emit(n.b) + ")";
      case SymKind::mul: return "(* " + emit(n.a) + " " + emit(n.b) + ")";
      case SymKind::div: return "(/ " + emit(n.a) + " " + emit(n.b) + ")";
      case SymKind::neg: return "(- " + emit(n.a) + ")";
      case SymKind::exp_fn: return "(exp " + emit(n.a) + ")";
      case SymKind::sin_fn: return "(sin " + emit(n.a) + ")";
      case SymKind::cos_fn: return "(cos " + emit(n.a) + ")";
      case SymKind::ite: return "(ite " + emit(n.a) + " " + emit(n.b) + " " + emit(n.c) + ")";
      case SymKind::le: return "(<= " + emit(n.a) + " " + emit(n.b) + ")";
      case SymKind::ge: return "(>= " + emit(n.a) + " " + emit(n.b) + ")";
      case SymKind::and_op: return "(and " + emit(n.a) + " " + emit(n.b) + ")";
    }
    return "";
  }

  const SymTable& t_;
  const std::vector<std::string>& vars_;
  std::unordered_map<int, int> refs_;
  std::unordered_map<int, std::string> names_;
};

}  // namespace

void export_smt2(const lyapnet::LyapunovNet& lyap, const lyapnet::ControllerNet& ctrl,
                 const lyapnet::ResidualDynamics& res, const netcore::ParamStore& params,
                 const dynamics::SystemSpec& spec, double c, double kappa,
                 const ExportOptions& opts, const std::string& path) {
  SymbolicModel model = build_symbolic_model(lyap, ctrl, res, params, spec, opts.limits);
  SymTable& t = model.table;

  std::vector<std::string> var_names;
  for (int i = 1; i <= spec.n; ++i) var_names.push_back("x" + std::to_string(i));
  std::string arglist, applied;
  for (const auto& name : var_names) {
    arglist += "(" + name + " Real) ";
    applied += " " + name;
  }
  if (!arglist.empty()) arglist.pop_back();

  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open SMT output: " + path);
  char short_buf[64];
  auto short_num = [&short_buf](double v) {
    std::snprintf(short_buf, sizeof(short_buf), "%g", v);
    return std::string(short_buf);
  };
  f << "; certificate-violation query (sat = counterexample to the decrease condition)\n";
  f << "; system: " << spec.name << "\n";
  f << "; zeta: " << short_num(opts.zeta) << "\n";
  f << "; precision: " << short_num(opts.precision) << "\n";
  f << "; level_c: " << smt_literal(c) << "\n";
  f << "; kappa: " << short_num(kappa) << "\n";
  f << "(set-logic QF_NRA)\n";
  f << "(set-info :precision " << smt_literal(opts.precision) << ")\n";

  SmtEmitter emitter(t, var_names);
  int let_counter = 0;
  f << "(define-fun normsq (" << arglist << ") Real "
    << emitter.render_root(model.norm_sq_expr, let_counter) << ")\n";
  f << "(define-fun V (" << arglist << ") Real "
    << emitter.render_root(model.v_expr, let_counter) << ")\n";
  f << "(define-fun u (" << arglist << ") Real "
    << emitter.render_root(model.u_expr, let_counter) << ")\n";
  f << "(define-fun vdot (" << arglist << ") Real "
    << emitter.render_root(model.vdot_expr, let_counter) << ")\n";

  for (const auto& name : var_names) {
    f << "(declare-fun " << name << " () Real)\n";
  }

  // Box membership.
  int box = -1;
  for (int d = 0; d < spec.n; ++d) {
    const int xd = t.variable(d);
    const int lo = t.ge(xd, t.constant(spec.state_box[static_cast<std::size_t>(d)].first));
    const int hi = t.le(xd, t.constant(spec.state_box[static_cast<std::size_t>(d)].second));
    const int both = t.and_op(lo, hi);
    box = (box == -1) ? both : t.and_op(box, both);
  }
  f << "(assert " << emitter.render_root(box, let_counter) << ")\n";

  // |x|^2 >= zeta^2 rules out the origin neighborhood without a sqrt.
  f << "(assert (>= (normsq" << applied << ") " << smt_literal(opts.zeta * opts.zeta)
    << "))\n";
  f << "(assert (<= (V" << applied << ") " << smt_literal(c) << "))\n";
  f << "(assert (>= (+ (vdot" << applied << ") (* " << smt_literal(kappa) << " (normsq"
    << applied << "))) 0.0))\n";

  f << "(check-sat)\n";
  f << "(exit)\n";
  require(f.good(), "SMT write failed: " + path);
}

// ---------------------------------------------------------------------------
// SMT-LIB2 reading
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch == ';') {
      flush();
      while (i < text.size() && text[i] != '\n') ++i;
    } else if (ch == '(' || ch == ')') {
      flush();
      tokens.push_back(std::string(1, ch));
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return tokens;
}

SExpr parse_sexpr(const std::vector<std::string>& tokens, std::size_t& pos) {
  require(pos < tokens.size(), "unexpected end of SMT input");
  if (tokens[pos] == "(") {
    ++pos;
    std::vector<SExpr> items;
    while (pos < tokens.size() && tokens[pos] != ")") {
      items.push_back(parse_sexpr(tokens, pos));
    }
    require(pos < tokens.size(), "missing closing parenthesis in SMT input");
    ++pos;  // consume ')'
    return SExpr{std::move(items)};
  }
  require(tokens[pos] != ")", "unexpected ')' in SMT input");
  return SExpr{tokens[pos++]};
}

bool is_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

struct Scope {
  std::vector<std::pair<std::string, double>> bindings;
  double lookup(const std::string& name, bool& found) const {
    for (auto it = bindings.rbegin(); it != bindings.rend(); ++it) {
      if (it->first == name) {
        found = true;
        return it->second;
      }
    }
    found = false;
    return 0.0;
  }
};

double eval_rec(const SExpr& e, const SmtDocument& doc, const Vec& x, Scope& scope) {
  if (e.is_atom()) {
    const std::string& s = e.atom();
    double num;
    if (is_number(s, num)) return num;
    if (s == "true") return 1.0;
    if (s == "false") return 0.0;
    bool found = false;
    const double bound = scope.lookup(s, found);
    if (found) return bound;
    for (std::size_t i = 0; i < doc.variables.size(); ++i) {
      if (doc.variables[i] == s) return x(static_cast<Eigen::Index>(i));
    }
    throw std::invalid_argument("unbound symbol in SMT term: " + s);
  }
  const auto& items = e.list();
  require(!items.empty() && items[0].is_atom(), "malformed SMT term");
  const std::string& op = items[0].atom();
  auto arg = [&](std::size_t i) { return eval_rec(items[i], doc, x, scope); };

  if (op == "+") {
    double v = 0.0;
    for (std::size_t i = 1; i < items.size(); ++i) v += arg(i);
    return v;
  }
  if (op == "-") {
    if (items.size() == 2) return -arg(1);
    double v = arg(1);
    for (std::size_t i = 2; i < items.size(); ++i) v -= arg(i);
    return v;
  }
  if (op == "*") {
    double v = 1.0;
    for (std::size_t i = 1; i < items.size(); ++i) v *= arg(i);
    return v;
  }
  if (op == "/") {
    double v = arg(1);
    for (std::size_t i = 2; i < items.size(); ++i) v /= arg(i);
    return v;
  }
  if (op == "exp") return std::exp(arg(1));
  if (op == "sin") return std::sin(arg(1));
  if (op == "cos") return std::cos(arg(1));
  if (op == "ite") return arg(1) != 0.0 ? arg(2) : arg(3);
  if (op == "<=") return arg(1) <= arg(2) ? 1.0 : 0.0;
  if (op == ">=") return arg(1) >= arg(2) ? 1.0 : 0.0;
  if (op == "<") return arg(1) < arg(2) ? 1.0 : 0.0;
  if (op == ">") return arg(1) > arg(2) ? 1.0 : 0.0;
  if (op == "=") return arg(1) == arg(2) ? 1.0 : 0.0;
  if (op == "and") {
    for (std::size_t i = 1; i < items.size(); ++i) {
      if (arg(i) == 0.0) return 0.0;
    }
    return 1.0;
  }
  if (op == "or") {
    for (std::size_t i = 1; i < items.size(); ++i) {
      if (arg(i) != 0.0) return 1.0;
    }
    return 0.0;
  }
  if (op == "not") return arg(1) == 0.0 ? 1.0 : 0.0;
  if (op == "let") {
    require(items.size() == 3, "let needs bindings and a body");
    const auto& binds = items[1].list();
    const std::size_t base = scope.bindings.size();
    for (const auto& b : binds) {
      const auto& pair = b.list();
      require(pair.size() == 2 && pair[0].is_atom(), "malformed let binding");
      // SMT-LIB let is parallel; evaluate against the outer scope.
      Scope outer{std::vector<std::pair<std::string, double>>(
          scope.bindings.begin(), scope.bindings.begin() + static_cast<long>(base))};
      scope.bindings.emplace_back(pair[0].atom(), eval_rec(pair[1], doc, x, outer));
    }
    const double v = eval_rec(items[2], doc, x, scope);
    scope.bindings.resize(base);
    return v;
  }
  auto def = doc.defined.find(op);
  if (def != doc.defined.end()) {
    const auto& fun = def->second;
    require(items.size() == fun.params.size() + 1, "arity mismatch applying " + op);
    Scope inner;
    for (std::size_t i = 0; i < fun.params.size(); ++i) {
      inner.bindings.emplace_back(fun.params[i], arg(i + 1));
    }
    return eval_rec(fun.body, doc, x, inner);
  }
  throw std::invalid_argument("unsupported SMT operator: " + op);
}

}  // namespace

SmtDocument read_smt2(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open SMT file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string text = ss.str();
  const auto tokens = tokenize(text);

  SmtDocument doc;
  std::size_t pos = 0;
  while (pos < tokens.size()) {
    SExpr form = parse_sexpr(tokens, pos);
    require(!form.is_atom(), "top-level SMT form must be a list");
    const auto& items = form.list();
    require(!items.empty() && items[0].is_atom(), "malformed SMT command");
    const std::string& cmd = items[0].atom();
    doc.all_commands.push_back(cmd);
    if (cmd == "declare-fun") {
      require(items.size() == 4 && items[1].is_atom(), "malformed declare-fun");
      require(!items[2].is_atom() && items[2].list().empty(),
              "declare-fun with arguments is not supported");
      doc.variables.push_back(items[1].atom());
    } else if (cmd == "define-fun") {
      require(items.size() == 5 && items[1].is_atom() && !items[2].is_atom(),
              "malformed define-fun");
      SmtDefinedFun fun;
      for (const auto& p : items[2].list()) {
        const auto& pair = p.list();
        require(pair.size() == 2 && pair[0].is_atom(), "malformed define-fun parameter");
        fun.params.push_back(pair[0].atom());
      }
      fun.body = items[4];
      doc.defined.emplace(items[1].atom(), std::move(fun));
    } else if (cmd == "assert") {
      require(items.size() == 2, "malformed assert");
      doc.asserts.push_back(items[1]);
    }
  }
  return doc;
}

double eval_sexpr(const SExpr& e, const SmtDocument& doc, const Vec& x) {
  Scope scope;
  return eval_rec(e, doc, x, scope);
}

double eval_defined_fun(const SmtDocument& doc, const std::string& name, const Vec& x) {
  auto it = doc.defined.find(name);
  require(it != doc.defined.end(), "no define-fun named " + name);
  const auto& fun = it->second;
  require(static_cast<Eigen::Index>(fun.params.size()) == x.size(),
          "state dimension does not match define-fun arity for " + name);
  Scope scope;
  for (std::size_t i = 0; i < fun.params.size(); ++i) {
    scope.bindings.emplace_back(fun.params[i], x(static_cast<Eigen::Index>(i)));
  }
  return eval_rec(fun.body, doc, x, scope);
}

bool eval_conjunction(const SmtDocument& doc, const Vec& x) {
  for (const auto& a : doc.asserts) {
    if (eval_sexpr(a, doc, x) == 0.0) return false;
  }
  return true;
}

}  // namespace roaforge::verify
