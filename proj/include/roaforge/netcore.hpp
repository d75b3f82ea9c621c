#pragma once

#include "roaforge/common.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace roaforge::netcore {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Named parameter matrices with deterministic (insertion) iteration order.
class ParamStore {
 public:
  int add(const std::string& name, Mat value);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  int index(const std::string& name) const;
  const Mat& at(const std::string& name) const { return values_[index(name)]; }
  Mat& at(const std::string& name) { return values_[index(name)]; }
  const Mat& value(int idx) const { return values_[static_cast<std::size_t>(idx)]; }
  Mat& value(int idx) { return values_[static_cast<std::size_t>(idx)]; }
  const std::string& name(int idx) const { return names_[static_cast<std::size_t>(idx)]; }
  int size() const { return static_cast<int>(values_.size()); }
  std::size_t scalar_count() const;

  /// Indices of parameters whose name starts with `prefix`, in store order.
  std::vector<int> group(const std::string& prefix) const;

  /// FNV-1a over the raw bytes of the selected parameters (store order).
  std::uint64_t hash(std::span<const int> indices) const;
  std::uint64_t hash() const;

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Dense network specification
// ---------------------------------------------------------------------------

enum class Activation { tanh, identity };

struct DenseNetSpec {
  std::vector<int> layer_dims;        // [in, h1, ..., out]
  std::vector<Activation> activations;  // one per layer
  std::vector<bool> bias;               // one per layer
  bool constrained = false;             // positive-definite block weight structure

  int layer_count() const { return static_cast<int>(layer_dims.size()) - 1; }
  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  void validate() const;

  static DenseNetSpec mlp(std::vector<int> dims, bool final_identity, bool with_bias = false);
  static DenseNetSpec constrained_net(std::vector<int> dims);
};

/// Weight floor for the constrained block structure; keeps the assembled
/// weight full-rank. Distinct from the loss offset epsilon.
inline constexpr double kEpsW = 1e-6;

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  neg,
  matmul,
  transpose,
  cwise_mul,
  cwise_div_safe,
  scale,
  add_const,
  tanh_fn,
  relu,
  sum,
  col_sum,
  row_broadcast,
  col_norm,
  gather_rows,
  scatter_rows,
  scalar_mul,
  reshape,
};

/// Eagerly-evaluated computation record. Adjoints are emitted as new tape
/// nodes, so gradient() output can itself be differentiated (needed for
/// losses that contain the gradient of the Lyapunov candidate).
class Tape {
 public:
  int leaf(Mat value, bool requires_grad = false);
  int constant(Mat value) { return leaf(std::move(value), false); }
  int constant_scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

  int add(int a, int b);
  int sub(int a, int b);
  int neg(int a);
  int matmul(int a, int b);
  int transpose(int a);
  int cwise_mul(int a, int b);
  int cwise_div_safe(int a, int b);  // denominator floored away from zero
  int scale(int a, double c);
  int add_const(int a, double c);
  int tanh_fn(int a);
  int relu(int a);
  int sum(int a);                    // 1x1
  int col_sum(int a);                // 1xN
  int row_broadcast(int a, int rows);
  int col_norm(int a);               // 1xN column 2-norms
  int gather_rows(int a, std::vector<int> rows);
  int scatter_rows(int a, std::vector<int> rows, int total_rows);
  int scalar_mul(int s, int a);      // (1x1 node) * matrix node
  int reshape(int a, int rows, int cols);  // column-major, size-preserving

  // Composite helpers.
  int dot(int a, int b) { return sum(cwise_mul(a, b)); }

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root. Returns one adjoint node id per
  /// requested node (-1 when the root does not depend on it). Adjoints are
  /// ordinary tape nodes and may be differentiated again.
  std::vector<int> gradient(int root, std::span<const int> wrt);

  Mat grad_value(int adjoint_id, int like_id) const;

 private:
  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    double cval = 0.0;
    int irows = 0;
    std::shared_ptr<const std::vector<int>> rows;
    Mat val;
    bool requires_grad = false;
  };

  int push(Node n);
  void check(int id) const;

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Parameter initialization, dense forward, SGD
// ---------------------------------------------------------------------------

/// Allocates the parameters of `spec` into `store` under `prefix`
/// (prefix.L<k>.W / .b, or .G1 / .G2 for constrained layers), drawn
/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)). Same seed, same bits.
void init_dense_params(const DenseNetSpec& spec, std::uint64_t seed, ParamStore& store,
                       const std::string& prefix);

/// Standalone store holding just this network.
ParamStore init_params(const DenseNetSpec& spec, std::uint64_t seed,
                       const std::string& prefix = "net");

/// Node ids of a store's parameters registered as differentiable leaves.
class ParamLeaves {
 public:
  ParamLeaves(Tape& tape, const ParamStore& store, std::span<const int> trainable);
  ParamLeaves(Tape& tape, const ParamStore& store);
  int node(const std::string& name) const;
  int node(int store_index) const { return ids_[static_cast<std::size_t>(store_index)]; }
  const std::vector<int>& ids() const { return ids_; }
  const ParamStore& store() const { return *store_; }

 private:
  const ParamStore* store_;
  std::vector<int> ids_;
};

/// Builds the dense forward graph on a batch (input_dim x N). Constrained
/// layers assemble W = [G1^T G1 + eps_w I ; G2] before the product.
int dense_forward(Tape& tape, const DenseNetSpec& spec, const ParamLeaves& leaves,
                  const std::string& prefix, int x_node);

/// Convenience single-input forward for tests and small callers.
struct ForwardResult {
  Tape tape;
  int x_node = -1;
  int out_node = -1;
  std::unique_ptr<ParamLeaves> leaves;
  Vec output;
};
ForwardResult forward(const DenseNetSpec& spec, const ParamStore& store,
                      const std::string& prefix, const Vec& x);

/// Plain (tape-free) evaluator with pre-assembled weights; used on hot paths
/// (rollouts, mesh sweeps) where no parameter gradients are needed.
class DenseNetEval {
 public:
  DenseNetEval() = default;
  DenseNetEval(const DenseNetSpec& spec, const ParamStore& store, const std::string& prefix);

  Vec operator()(const Vec& x) const;
  Mat forward_batch(const Mat& X) const;

  /// Forward pass keeping post-activations; backprop of out_adj through the
  /// net, returning d(out_adj . out)/dx. Used for analytic Lyapunov gradients.
  Vec vjp(const Vec& x, const Vec& out_adj) const;
  Mat vjp_batch(const Mat& X, const Mat& OutAdj) const;

  const Mat& weight(int layer) const { return weights_[static_cast<std::size_t>(layer)]; }
  int layer_count() const { return static_cast<int>(weights_.size()); }

 private:
  std::vector<Mat> weights_;
  std::vector<Vec> biases_;  // empty vec = no bias
  std::vector<Activation> acts_;
};

/// Assembled effective weight of layer `layer` (identity for unconstrained).
Mat assembled_weight(const DenseNetSpec& spec, const ParamStore& store,
                     const std::string& prefix, int layer);

/// Gradients keyed like the store; missing entries mean zero.
struct GradMap {
  std::vector<Mat> grads;  // aligned with store indices; empty Mat = zero
  explicit GradMap(const ParamStore& store) : grads(static_cast<std::size_t>(store.size())) {}
  void accumulate(int idx, const Mat& g);
  void scale_all(double s);
  bool all_finite() const;
  double squared_norm() const;
};

/// Collects d(root)/d(param) for the given leaves into a GradMap.
GradMap collect_gradients(Tape& tape, int root, const ParamLeaves& leaves);

/// p <- p - lr * g for the given subset. Returns false (and leaves the store
/// untouched) when any gradient entry is non-finite.
bool sgd_step(ParamStore& store, const GradMap& grads, double lr,
              std::span<const int> subset);
bool sgd_step(ParamStore& store, const GradMap& grads, double lr);

/// base_lr * decay^floor(iter / step_size)
double step_lr(double base_lr, int iter, int step_size, double decay);

// ---------------------------------------------------------------------------
// Checkpoint format: JSON name -> {shape, row-major values}, fixed key order,
// 17-significant-digit decimals.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::unordered_map<std::string, std::string>& meta = {});

struct Checkpoint {
  ParamStore params;
  std::unordered_map<std::string, std::string> meta;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace roaforge::netcore
