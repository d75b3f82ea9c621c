#pragma once

#include "roaforge/common.hpp"
#include "roaforge/dynamics.hpp"
#include "roaforge/lyapnet.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace roaforge::verify {

// ---------------------------------------------------------------------------
// Hash-consed symbolic expressions (reals; comparisons evaluate to 0/1)
// ---------------------------------------------------------------------------

enum class SymKind : std::uint8_t {
  constant, variable, add, sub, mul, div, neg, exp_fn, sin_fn, cos_fn,
  ite, le, ge, and_op,
};

struct SymNode {
  SymKind kind;
  double value = 0.0;  // constant payload
  int var = -1;        // variable payload
  int a = -1, b = -1, c = -1;
};

/// DAG with constant folding and structural sharing; derivatives are built
/// symbolically over the same table.
class SymTable {
 public:
  int constant(double v);
  int variable(int index);
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  int neg(int a);
  int exp_fn(int a);
  int sin_fn(int a);
  int cos_fn(int a);
  int ite(int cond, int then_e, int else_e);
  int le(int a, int b);
  int ge(int a, int b);
  int and_op(int a, int b);

  /// tanh written as (1 - exp(-2y)) / (1 + exp(-2y)).
  int tanh_via_exp(int y);

  double eval(int id, const Vec& x) const;
  int derivative(int id, int var);

  const SymNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

 private:
  int intern(SymNode n);
  std::vector<SymNode> nodes_;
  std::unordered_map<std::uint64_t, std::vector<int>> buckets_;
  std::unordered_map<std::uint64_t, int> deriv_memo_;
};

/// Symbolic closed-loop certificate pieces for one model snapshot.
struct SymbolicModel {
  SymTable table;
  int v_expr = -1;                 // V(x)
  int vdot_expr = -1;              // grad V . (fhat + ghat u)
  int u_expr = -1;                 // controller output (m = 1)
  int norm_sq_expr = -1;           // |x|^2
  std::vector<int> box_lo_exprs;   // unused placeholders kept empty
};

struct ExportLimits {
  int max_phi_width = 16;
  int max_net_width = 64;
};

/// Builds the full symbolic expansion; throws std::invalid_argument when the
/// network widths exceed the limits (SMT export is meant for reduced nets).
SymbolicModel build_symbolic_model(const lyapnet::LyapunovNet& lyap,
                                   const lyapnet::ControllerNet& ctrl,
                                   const lyapnet::ResidualDynamics& res,
                                   const netcore::ParamStore& params,
                                   const dynamics::SystemSpec& spec,
                                   const ExportLimits& limits = {});

// ---------------------------------------------------------------------------
// Grid falsification of the certificate condition
// ---------------------------------------------------------------------------

struct FalsificationResult {
  std::optional<Vec> counterexample;
  long checked_points = 0;  // points passing |x| >= zeta and V <= c
  double resolution = 0.0;
  double zeta = 0.0;
  double level_c = 0.0;
  double margin_min = 0.0;  // min over checked region of -(vdot + kappa |x|^2)
};

/// Scans a uniform grid (spacing <= resolution) for a point with
/// |x| >= zeta, V(x) <= c and vdot + kappa |x|^2 >= 0; first hit in
/// lexicographic order wins.
FalsificationResult falsify_grid(const lyapnet::LyapunovEval& lyap,
                                 const lyapnet::ControllerEval& ctrl,
                                 const lyapnet::ResidualEval& res,
                                 const dynamics::SystemSpec& spec, double c, double zeta,
                                 double kappa, double resolution);

// ---------------------------------------------------------------------------
// SMT-LIB2 export and the internal reader used for round-trip validation
// ---------------------------------------------------------------------------

struct ExportOptions {
  double zeta = 0.3;
  double precision = 1e-3;
  ExportLimits limits;
};

/// Writes the certificate-violation query: box bounds, |x|^2 >= zeta^2,
/// V <= c, vdot + kappa |x|^2 >= 0, (check-sat). LF endings, 17-digit
/// literals; sat means counterexample.
void export_smt2(const lyapnet::LyapunovNet& lyap, const lyapnet::ControllerNet& ctrl,
                 const lyapnet::ResidualDynamics& res, const netcore::ParamStore& params,
                 const dynamics::SystemSpec& spec, double c, double kappa,
                 const ExportOptions& opts, const std::string& path);

struct SExpr {
  std::variant<std::string, std::vector<SExpr>> data;
  bool is_atom() const { return std::holds_alternative<std::string>(data); }
  const std::string& atom() const { return std::get<std::string>(data); }
  const std::vector<SExpr>& list() const { return std::get<std::vector<SExpr>>(data); }
};

struct SmtDefinedFun {
  std::vector<std::string> params;
  SExpr body;
};

struct SmtDocument {
  std::vector<std::string> variables;   // declaration order
  std::vector<SExpr> asserts;
  std::map<std::string, SmtDefinedFun> defined;
  std::vector<std::string> all_commands;
};

SmtDocument read_smt2(const std::string& path);

/// Evaluates a parsed term with x bound to the declared variables in order.
/// Comparisons and boolean connectives evaluate to 1.0 / 0.0.
double eval_sexpr(const SExpr& e, const SmtDocument& doc, const Vec& x);

/// Applies a define-fun to the state x (components bound to the declared
/// parameters in order).
double eval_defined_fun(const SmtDocument& doc, const std::string& name, const Vec& x);

/// True when every assert evaluates truthy at x (the Eq-15 conjunction).
bool eval_conjunction(const SmtDocument& doc, const Vec& x);

/// Decimal literal with 17 significant digits in positional notation
/// (SMT-LIB has no exponent form); negatives wrapped as (- v).
std::string smt_literal(double v);

}  // namespace roaforge::verify
