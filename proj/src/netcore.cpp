#include "roaforge/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace roaforge::netcore {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

int ParamStore::add(const std::string& name, Mat value) {
  require(index_.count(name) == 0, "duplicate parameter name: " + name);
  require(value.allFinite(), "non-finite initial value for parameter: " + name);
  const int idx = static_cast<int>(values_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
  index_.emplace(name, idx);
  return idx;
}

int ParamStore::index(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), "unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<int> ParamStore::group(const std::string& prefix) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (names_[static_cast<std::size_t>(i)].rfind(prefix, 0) == 0) out.push_back(i);
  }
  return out;
}

std::uint64_t ParamStore::hash(std::span<const int> indices) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (int idx : indices) {
    const Mat& m = values_[static_cast<std::size_t>(idx)];
    mix(reinterpret_cast<const unsigned char*>(m.data()),
        static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return h;
}

std::uint64_t ParamStore::hash() const {
  std::vector<int> all(static_cast<std::size_t>(size()));
  std::iota(all.begin(), all.end(), 0);
  return hash(all);
}

// ---------------------------------------------------------------------------
// DenseNetSpec
// ---------------------------------------------------------------------------

void DenseNetSpec::validate() const {
  require(layer_dims.size() >= 2, "network needs at least one layer");
  require(activations.size() == layer_dims.size() - 1, "one activation per layer required");
  require(bias.size() == layer_dims.size() - 1, "one bias flag per layer required");
  for (int d : layer_dims) require(d >= 1, "layer dimensions must be positive");
  if (constrained) {
    for (std::size_t i = 0; i + 1 < layer_dims.size(); ++i) {
      require(layer_dims[i] <= layer_dims[i + 1],
              "constrained layers need non-decreasing dimensions");
    }
    for (bool b : bias) require(!b, "constrained layers are bias-free");
  }
}

DenseNetSpec DenseNetSpec::mlp(std::vector<int> dims, bool final_identity, bool with_bias) {
  DenseNetSpec spec;
  spec.layer_dims = std::move(dims);
  const int layers = static_cast<int>(spec.layer_dims.size()) - 1;
  spec.activations.assign(static_cast<std::size_t>(layers), Activation::tanh);
  if (final_identity && layers > 0) spec.activations.back() = Activation::identity;
  spec.bias.assign(static_cast<std::size_t>(layers), with_bias);
  spec.validate();
  return spec;
}

DenseNetSpec DenseNetSpec::constrained_net(std::vector<int> dims) {
  DenseNetSpec spec;
  spec.layer_dims = std::move(dims);
  const int layers = static_cast<int>(spec.layer_dims.size()) - 1;
  spec.activations.assign(static_cast<std::size_t>(layers), Activation::tanh);
  spec.bias.assign(static_cast<std::size_t>(layers), false);
  spec.constrained = true;
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
constexpr double kDivFloor = 1e-30;
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check(int id) const {
  require(id >= 0 && id < static_cast<int>(nodes_.size()), "tape node id out of range");
}

int Tape::leaf(Mat value, bool requires_grad) {
  Node n;
  n.op = Op::leaf;
  n.val = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  check(a); check(b);
  Node n;
  n.op = Op::add;
  n.a = a; n.b = b;
  n.val = nodes_[a].val + nodes_[b].val;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(n));
}

int Tape::sub(int a, int b) {
  check(a); check(b);
  Node n;
  n.op = Op::sub;
  n.a = a; n.b = b;
  n.val = nodes_[a].val - nodes_[b].val;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(n));
}

int Tape::neg(int a) {
  check(a);
  Node n;
  n.op = Op::neg;
  n.a = a;
  n.val = -nodes_[a].val;
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::matmul(int a, int b) {
  check(a); check(b);
  require(nodes_[a].val.cols() == nodes_[b].val.rows(), "matmul shape mismatch");
  Node n;
  n.op = Op::matmul;
  n.a = a; n.b = b;
  n.val = nodes_[a].val * nodes_[b].val;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(n));
}

int Tape::transpose(int a) {
  check(a);
  Node n;
  n.op = Op::transpose;
  n.a = a;
  n.val = nodes_[a].val.transpose();
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::cwise_mul(int a, int b) {
  check(a); check(b);
  require(nodes_[a].val.rows() == nodes_[b].val.rows() &&
          nodes_[a].val.cols() == nodes_[b].val.cols(), "cwise_mul shape mismatch");
  Node n;
  n.op = Op::cwise_mul;
  n.a = a; n.b = b;
  n.val = nodes_[a].val.cwiseProduct(nodes_[b].val);
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(n));
}

int Tape::cwise_div_safe(int a, int b) {
  check(a); check(b);
  require(nodes_[a].val.rows() == nodes_[b].val.rows() &&
          nodes_[a].val.cols() == nodes_[b].val.cols(), "cwise_div_safe shape mismatch");
  Node n;
  n.op = Op::cwise_div_safe;
  n.a = a; n.b = b;
  n.val = nodes_[a].val.array() / nodes_[b].val.array().max(kDivFloor);
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(n));
}

int Tape::scale(int a, double c) {
  check(a);
  Node n;
  n.op = Op::scale;
  n.a = a;
  n.cval = c;
  n.val = nodes_[a].val * c;
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::add_const(int a, double c) {
  check(a);
  Node n;
  n.op = Op::add_const;
  n.a = a;
  n.cval = c;
  n.val = nodes_[a].val.array() + c;
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::tanh_fn(int a) {
  check(a);
  Node n;
  n.op = Op::tanh_fn;
  n.a = a;
  n.val = nodes_[a].val.array().tanh();
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::relu(int a) {
  check(a);
  Node n;
  n.op = Op::relu;
  n.a = a;
  n.val = nodes_[a].val.cwiseMax(0.0);
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::sum(int a) {
  check(a);
  Node n;
  n.op = Op::sum;
  n.a = a;
  n.val = Mat::Constant(1, 1, nodes_[a].val.sum());
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::col_sum(int a) {
  check(a);
  Node n;
  n.op = Op::col_sum;
  n.a = a;
  n.val = nodes_[a].val.colwise().sum();
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::row_broadcast(int a, int rows) {
  check(a);
  require(nodes_[a].val.rows() == 1, "row_broadcast needs a row vector");
  Node n;
  n.op = Op::row_broadcast;
  n.a = a;
  n.irows = rows;
  n.val = nodes_[a].val.replicate(rows, 1);
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::col_norm(int a) {
  check(a);
  Node n;
  n.op = Op::col_norm;
  n.a = a;
  n.val = nodes_[a].val.colwise().norm();
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::gather_rows(int a, std::vector<int> rows) {
  check(a);
  const Mat& src = nodes_[a].val;
  Mat out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < src.rows(), "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  }
  Node n;
  n.op = Op::gather_rows;
  n.a = a;
  n.rows = std::make_shared<const std::vector<int>>(std::move(rows));
  n.val = std::move(out);
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::scatter_rows(int a, std::vector<int> rows, int total_rows) {
  check(a);
  const Mat& src = nodes_[a].val;
  require(static_cast<Eigen::Index>(rows.size()) == src.rows(),
          "scatter_rows needs one target row per source row");
  Mat out = Mat::Zero(total_rows, src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < total_rows, "scatter_rows index out of range");
    // += so duplicate targets accumulate (adjoint of gather_rows).
    out.row(rows[i]) += src.row(static_cast<Eigen::Index>(i));
  }
  Node n;
  n.op = Op::scatter_rows;
  n.a = a;
  n.irows = total_rows;
  n.rows = std::make_shared<const std::vector<int>>(std::move(rows));
  n.val = std::move(out);
  n.requires_grad = nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::scalar_mul(int s, int a) {
  check(s); check(a);
  require(nodes_[s].val.size() == 1, "scalar_mul needs a 1x1 scalar node");
  Node n;
  n.op = Op::scalar_mul;
  n.a = s; n.b = a;
  n.val = nodes_[s].val(0, 0) * nodes_[a].val;
  n.requires_grad = nodes_[s].requires_grad || nodes_[a].requires_grad;
  return push(std::move(n));
}

int Tape::reshape(int a, int rows, int cols) {
  check(a);
  const Mat& src = nodes_[static_cast<std::size_t>(a)].val;
  require(src.size() == static_cast<Eigen::Index>(rows) * cols, "reshape size mismatch");
  Node n;
  n.op = Op::reshape;
  n.a = a;
  n.val = Eigen::Map<const Mat>(src.data(), rows, cols);
  n.requires_grad = nodes_[static_cast<std::size_t>(a)].requires_grad;
  return push(std::move(n));
}

std::vector<int> Tape::gradient(int root, std::span<const int> wrt) {
  check(root);
  require(nodes_[static_cast<std::size_t>(root)].val.size() == 1,
          "gradient root must be scalar (1x1)");

  const int frontier = static_cast<int>(nodes_.size());
  std::vector<int> adj(static_cast<std::size_t>(frontier), -1);

  auto accumulate = [&](int target, int contribution) {
    if (target >= frontier) return;  // nodes created during this sweep
    if (!nodes_[static_cast<std::size_t>(target)].requires_grad) return;
    int& slot = adj[static_cast<std::size_t>(target)];
    slot = (slot == -1) ? contribution : add(slot, contribution);
  };

  adj[static_cast<std::size_t>(root)] =
      constant(Mat::Ones(1, 1));

  for (int id = root; id >= 0; --id) {
    const int g = adj[static_cast<std::size_t>(id)];
    if (g == -1) continue;
    // Copy the small POD fields; vjp construction may reallocate nodes_.
    const Op op = nodes_[static_cast<std::size_t>(id)].op;
    const int ia = nodes_[static_cast<std::size_t>(id)].a;
    const int ib = nodes_[static_cast<std::size_t>(id)].b;
    const double cval = nodes_[static_cast<std::size_t>(id)].cval;
    const auto rows = nodes_[static_cast<std::size_t>(id)].rows;

    switch (op) {
      case Op::leaf:
        break;
      case Op::add:
        accumulate(ia, g);
        accumulate(ib, g);
        break;
      case Op::sub:
        accumulate(ia, g);
        accumulate(ib, neg(g));
        break;
      case Op::neg:
        accumulate(ia, neg(g));
        break;
      case Op::matmul:
        if (nodes_[static_cast<std::size_t>(ia)].requires_grad)
          accumulate(ia, matmul(g, transpose(ib)));
        if (nodes_[static_cast<std::size_t>(ib)].requires_grad)
          accumulate(ib, matmul(transpose(ia), g));
        break;
      case Op::transpose:
        accumulate(ia, transpose(g));
        break;
      case Op::cwise_mul:
        if (nodes_[static_cast<std::size_t>(ia)].requires_grad)
          accumulate(ia, cwise_mul(g, ib));
        if (nodes_[static_cast<std::size_t>(ib)].requires_grad)
          accumulate(ib, cwise_mul(g, ia));
        break;
      case Op::cwise_div_safe:
        if (nodes_[static_cast<std::size_t>(ia)].requires_grad)
          accumulate(ia, cwise_div_safe(g, ib));
        if (nodes_[static_cast<std::size_t>(ib)].requires_grad)
          accumulate(ib, neg(cwise_div_safe(cwise_mul(g, id), ib)));
        break;
      case Op::scale:
        accumulate(ia, scale(g, cval));
        break;
      case Op::add_const:
        accumulate(ia, g);
        break;
      case Op::tanh_fn: {
        // d tanh = 1 - tanh^2, reusing this node's value.
        const int sq = cwise_mul(id, id);
        const int one_minus = add_const(neg(sq), 1.0);
        accumulate(ia, cwise_mul(g, one_minus));
        break;
      }
      case Op::relu: {
        const Mat mask = (nodes_[static_cast<std::size_t>(ia)].val.array() > 0.0)
                             .cast<double>()
                             .matrix();
        accumulate(ia, cwise_mul(g, constant(mask)));
        break;
      }
      case Op::sum: {
        const Mat& in = nodes_[static_cast<std::size_t>(ia)].val;
        const int ones = constant(Mat::Ones(in.rows(), in.cols()));
        accumulate(ia, scalar_mul(g, ones));
        break;
      }
      case Op::col_sum: {
        const int r = static_cast<int>(nodes_[static_cast<std::size_t>(ia)].val.rows());
        accumulate(ia, row_broadcast(g, r));
        break;
      }
      case Op::row_broadcast:
        accumulate(ia, col_sum(g));
        break;
      case Op::col_norm: {
        // d||col|| = col / max(||col||, floor)
        const int r = static_cast<int>(nodes_[static_cast<std::size_t>(ia)].val.rows());
        const int ratio = cwise_div_safe(g, id);
        accumulate(ia, cwise_mul(ia, row_broadcast(ratio, r)));
        break;
      }
      case Op::gather_rows: {
        const int total = static_cast<int>(nodes_[static_cast<std::size_t>(ia)].val.rows());
        accumulate(ia, scatter_rows(g, *rows, total));
        break;
      }
      case Op::scatter_rows:
        accumulate(ia, gather_rows(g, *rows));
        break;
      case Op::scalar_mul: {
        if (nodes_[static_cast<std::size_t>(ia)].requires_grad)
          accumulate(ia, sum(cwise_mul(g, ib)));
        if (nodes_[static_cast<std::size_t>(ib)].requires_grad)
          accumulate(ib, scalar_mul(ia, g));
        break;
      }
      case Op::reshape: {
        const Mat& in = nodes_[static_cast<std::size_t>(ia)].val;
        accumulate(ia, reshape(g, static_cast<int>(in.rows()), static_cast<int>(in.cols())));
        break;
      }
    }
  }

  std::vector<int> out;
  out.reserve(wrt.size());
  for (int id : wrt) {
    check(id);
    out.push_back(id < frontier ? adj[static_cast<std::size_t>(id)] : -1);
  }
  return out;
}

Mat Tape::grad_value(int adjoint_id, int like_id) const {
  if (adjoint_id == -1) {
    const Mat& like = nodes_[static_cast<std::size_t>(like_id)].val;
    return Mat::Zero(like.rows(), like.cols());
  }
  return nodes_[static_cast<std::size_t>(adjoint_id)].val;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

Mat uniform_matrix(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

std::string layer_name(const std::string& prefix, int layer, const char* part) {
  return prefix + ".L" + std::to_string(layer) + "." + part;
}

}  // namespace

void init_dense_params(const DenseNetSpec& spec, std::uint64_t seed, ParamStore& store,
                       const std::string& prefix) {
  spec.validate();
  std::mt19937_64 rng(seed);
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int din = spec.layer_dims[static_cast<std::size_t>(l)];
    const int dout = spec.layer_dims[static_cast<std::size_t>(l) + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    if (spec.constrained) {
      store.add(layer_name(prefix, l, "G1"), uniform_matrix(din, din, bound, rng));
      if (dout > din) {
        store.add(layer_name(prefix, l, "G2"), uniform_matrix(dout - din, din, bound, rng));
      }
    } else {
      store.add(layer_name(prefix, l, "W"), uniform_matrix(dout, din, bound, rng));
      if (spec.bias[static_cast<std::size_t>(l)]) {
        store.add(layer_name(prefix, l, "b"), uniform_matrix(dout, 1, bound, rng));
      }
    }
  }
}

ParamStore init_params(const DenseNetSpec& spec, std::uint64_t seed, const std::string& prefix) {
  ParamStore store;
  init_dense_params(spec, seed, store, prefix);
  return store;
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

ParamLeaves::ParamLeaves(Tape& tape, const ParamStore& store, std::span<const int> trainable)
    : store_(&store) {
  std::vector<bool> is_trainable(static_cast<std::size_t>(store.size()), false);
  for (int idx : trainable) is_trainable[static_cast<std::size_t>(idx)] = true;
  ids_.reserve(static_cast<std::size_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) {
    ids_.push_back(tape.leaf(store.value(i), is_trainable[static_cast<std::size_t>(i)]));
  }
}

ParamLeaves::ParamLeaves(Tape& tape, const ParamStore& store) : store_(&store) {
  ids_.reserve(static_cast<std::size_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) ids_.push_back(tape.leaf(store.value(i), true));
}

int ParamLeaves::node(const std::string& name) const {
  return ids_[static_cast<std::size_t>(store_->index(name))];
}

int dense_forward(Tape& tape, const DenseNetSpec& spec, const ParamLeaves& leaves,
                  const std::string& prefix, int x_node) {
  spec.validate();
  require(tape.value(x_node).rows() == spec.input_dim(), "dense_forward input dim mismatch");
  int h = x_node;
  const int batch = static_cast<int>(tape.value(x_node).cols());
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int din = spec.layer_dims[static_cast<std::size_t>(l)];
    const int dout = spec.layer_dims[static_cast<std::size_t>(l) + 1];
    int w;
    if (spec.constrained) {
      const int g1 = leaves.node(layer_name(prefix, l, "G1"));
      int top = tape.add(tape.matmul(tape.transpose(g1), g1),
                         tape.constant(Mat::Identity(din, din) * kEpsW));
      if (dout > din) {
        const int g2 = leaves.node(layer_name(prefix, l, "G2"));
        std::vector<int> top_rows(static_cast<std::size_t>(din));
        std::iota(top_rows.begin(), top_rows.end(), 0);
        std::vector<int> bot_rows(static_cast<std::size_t>(dout - din));
        std::iota(bot_rows.begin(), bot_rows.end(), din);
        w = tape.add(tape.scatter_rows(top, top_rows, dout),
                     tape.scatter_rows(g2, bot_rows, dout));
      } else {
        w = top;
      }
    } else {
      w = leaves.node(layer_name(prefix, l, "W"));
    }
    int z = tape.matmul(w, h);
    if (!spec.constrained && spec.bias[static_cast<std::size_t>(l)]) {
      const int b = leaves.node(layer_name(prefix, l, "b"));
      // Bias broadcast across the batch.
      z = tape.add(z, tape.matmul(b, tape.constant(Mat::Ones(1, batch))));
    }
    h = (spec.activations[static_cast<std::size_t>(l)] == Activation::tanh) ? tape.tanh_fn(z)
                                                                            : z;
  }
  return h;
}

ForwardResult forward(const DenseNetSpec& spec, const ParamStore& store,
                      const std::string& prefix, const Vec& x) {
  ForwardResult r;
  r.x_node = r.tape.leaf(x, true);
  r.leaves = std::make_unique<ParamLeaves>(r.tape, store);
  r.out_node = dense_forward(r.tape, spec, *r.leaves, prefix, r.x_node);
  r.output = r.tape.value(r.out_node).col(0);
  return r;
}

// ---------------------------------------------------------------------------
// Fast evaluator
// ---------------------------------------------------------------------------

Mat assembled_weight(const DenseNetSpec& spec, const ParamStore& store,
                     const std::string& prefix, int layer) {
  const int din = spec.layer_dims[static_cast<std::size_t>(layer)];
  const int dout = spec.layer_dims[static_cast<std::size_t>(layer) + 1];
  if (!spec.constrained) return store.at(layer_name(prefix, layer, "W"));
  const Mat& g1 = store.at(layer_name(prefix, layer, "G1"));
  Mat w(dout, din);
  w.topRows(din) = g1.transpose() * g1 + kEpsW * Mat::Identity(din, din);
  if (dout > din) w.bottomRows(dout - din) = store.at(layer_name(prefix, layer, "G2"));
  return w;
}

DenseNetEval::DenseNetEval(const DenseNetSpec& spec, const ParamStore& store,
                           const std::string& prefix) {
  spec.validate();
  for (int l = 0; l < spec.layer_count(); ++l) {
    weights_.push_back(assembled_weight(spec, store, prefix, l));
    if (!spec.constrained && spec.bias[static_cast<std::size_t>(l)]) {
      biases_.push_back(store.at(layer_name(prefix, l, "b")).col(0));
    } else {
      biases_.emplace_back();
    }
    acts_.push_back(spec.activations[static_cast<std::size_t>(l)]);
  }
}

Vec DenseNetEval::operator()(const Vec& x) const {
  Vec h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Vec z = weights_[l] * h;
    if (biases_[l].size() > 0) z += biases_[l];
    h = (acts_[l] == Activation::tanh) ? Vec(z.array().tanh()) : std::move(z);
  }
  return h;
}

Mat DenseNetEval::forward_batch(const Mat& X) const {
  Mat h = X;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Mat z = weights_[l] * h;
    if (biases_[l].size() > 0) z.colwise() += biases_[l];
    h = (acts_[l] == Activation::tanh) ? Mat(z.array().tanh()) : std::move(z);
  }
  return h;
}

Vec DenseNetEval::vjp(const Vec& x, const Vec& out_adj) const {
  std::vector<Vec> post(weights_.size());
  Vec h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Vec z = weights_[l] * h;
    if (biases_[l].size() > 0) z += biases_[l];
    h = (acts_[l] == Activation::tanh) ? Vec(z.array().tanh()) : std::move(z);
    post[l] = h;
  }
  Vec delta = out_adj;
  for (int l = static_cast<int>(weights_.size()) - 1; l >= 0; --l) {
    const std::size_t ul = static_cast<std::size_t>(l);
    if (acts_[ul] == Activation::tanh) {
      delta.array() *= (1.0 - post[ul].array().square());
    }
    delta = weights_[ul].transpose() * delta;
  }
  return delta;
}

Mat DenseNetEval::vjp_batch(const Mat& X, const Mat& OutAdj) const {
  std::vector<Mat> post(weights_.size());
  Mat h = X;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Mat z = weights_[l] * h;
    if (biases_[l].size() > 0) z.colwise() += biases_[l];
    h = (acts_[l] == Activation::tanh) ? Mat(z.array().tanh()) : std::move(z);
    post[l] = h;
  }
  Mat delta = OutAdj;
  for (int l = static_cast<int>(weights_.size()) - 1; l >= 0; --l) {
    const std::size_t ul = static_cast<std::size_t>(l);
    if (acts_[ul] == Activation::tanh) {
      delta.array() *= (1.0 - post[ul].array().square());
    }
    delta = weights_[ul].transpose() * delta;
  }
  return delta;
}

// ---------------------------------------------------------------------------
// Gradients and SGD
// ---------------------------------------------------------------------------

void GradMap::accumulate(int idx, const Mat& g) {
  Mat& slot = grads[static_cast<std::size_t>(idx)];
  if (slot.size() == 0) {
    slot = g;
  } else {
    slot += g;
  }
}

void GradMap::scale_all(double s) {
  for (Mat& g : grads) {
    if (g.size() > 0) g *= s;
  }
}

bool GradMap::all_finite() const {
  for (const Mat& g : grads) {
    if (g.size() > 0 && !g.allFinite()) return false;
  }
  return true;
}

double GradMap::squared_norm() const {
  double s = 0.0;
  for (const Mat& g : grads) {
    if (g.size() > 0) s += g.squaredNorm();
  }
  return s;
}

GradMap collect_gradients(Tape& tape, int root, const ParamLeaves& leaves) {
  GradMap out(leaves.store());
  std::vector<int> wrt;
  std::vector<int> which;
  for (int i = 0; i < leaves.store().size(); ++i) {
    if (tape.requires_grad(leaves.node(i))) {
      wrt.push_back(leaves.node(i));
      which.push_back(i);
    }
  }
  const std::vector<int> adj = tape.gradient(root, wrt);
  for (std::size_t k = 0; k < adj.size(); ++k) {
    if (adj[k] != -1) out.accumulate(which[k], tape.value(adj[k]));
  }
  return out;
}

bool sgd_step(ParamStore& store, const GradMap& grads, double lr, std::span<const int> subset) {
  require(lr > 0.0, "sgd_step needs lr > 0");
  for (int idx : subset) {
    const Mat& g = grads.grads[static_cast<std::size_t>(idx)];
    if (g.size() > 0 && !g.allFinite()) return false;
  }
  for (int idx : subset) {
    const Mat& g = grads.grads[static_cast<std::size_t>(idx)];
    if (g.size() > 0) store.value(idx) -= lr * g;
  }
  return true;
}

bool sgd_step(ParamStore& store, const GradMap& grads, double lr) {
  std::vector<int> all(static_cast<std::size_t>(store.size()));
  std::iota(all.begin(), all.end(), 0);
  return sgd_step(store, grads, lr, all);
}

double step_lr(double base_lr, int iter, int step_size, double decay) {
  require(step_size >= 1, "step_lr needs step_size >= 1");
  require(decay > 0.0 && decay <= 1.0, "step_lr needs 0 < decay <= 1");
  require(iter >= 0, "step_lr needs iter >= 0");
  return base_lr * std::pow(decay, static_cast<double>(iter / step_size));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
      out.push_back(c);
    } else {
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::unordered_map<std::string, std::string>& meta) {
  // Hand-rolled writer: key order must follow the store and floats carry
  // 17 significant digits for exact round-trip.
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    require(f.good(), "cannot open checkpoint for writing: " + tmp);
    f << "{\n";
    f << "  \"format\": \"roaforge-checkpoint-v1\",\n";
    f << "  \"meta\": {";
    std::vector<std::string> keys;
    for (const auto& [k, v] : meta) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    for (std::size_t i = 0; i < keys.size(); ++i) {
      f << (i == 0 ? "" : ", ") << "\"" << json_escape(keys[i]) << "\": \""
        << json_escape(meta.at(keys[i])) << "\"";
    }
    f << "},\n";
    f << "  \"params\": {\n";
    for (int i = 0; i < store.size(); ++i) {
      const Mat& m = store.value(i);
      f << "    \"" << json_escape(store.name(i)) << "\": {\"shape\": [" << m.rows() << ", "
        << m.cols() << "], \"values\": [";
      bool first = true;
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          f << (first ? "" : ", ") << format_double(m(r, c));
          first = false;
        }
      }
      f << "]}" << (i + 1 < store.size() ? "," : "") << "\n";
    }
    f << "  }\n";
    f << "}\n";
    require(f.good(), "checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open checkpoint: " + path);
  nlohmann::ordered_json doc = nlohmann::ordered_json::parse(f);
  require(doc.value("format", "") == std::string("roaforge-checkpoint-v1"),
          "unrecognized checkpoint format");
  Checkpoint ck;
  for (auto& [k, v] : doc.at("meta").items()) ck.meta[k] = v.get<std::string>();
  for (auto& [name, entry] : doc.at("params").items()) {
    const auto shape = entry.at("shape");
    const int rows = shape.at(0).get<int>();
    const int cols = shape.at(1).get<int>();
    const auto& vals = entry.at("values");
    require(static_cast<int>(vals.size()) == rows * cols, "checkpoint shape/value mismatch: " + name);
    Mat m(rows, cols);
    std::size_t k2 = 0;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = vals.at(k2++).get<double>();
    ck.params.add(name, std::move(m));
  }
  return ck;
}

}  // namespace roaforge::netcore
