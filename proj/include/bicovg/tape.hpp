#pragma once

// GradientGroup: one unit of local learning. It owns a set of named
// parameters, their accumulated gradients, and a recorded operation trace for
// a single forward segment. backward() differentiates the trace in reverse,
// accumulates into the owned parameter gradients, and releases the trace.
// Nothing here can touch another group's parameters, which is the whole
// point: gradient isolation is structural, not a convention.
//
// Values flow through ops as `Val` (tensor + node id). A node id of -1 means
// untracked: eval-mode tensors and detached block outputs. detach() is just
// id stripping; the tensor storage is shared, so it is value-identical by
// construction.
//
// Gradient buffers for a backward sweep are held until the sweep finishes,
// then released together with the trace. The memory model counts them that
// way (see memmodel.hpp).

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bicovg/tensor.hpp"

namespace bicovg {

using ParamId = int;

class GradientGroup;

struct Val {
  Tensor4 t;
  int node = -1;
  GradientGroup* owner = nullptr;

  Val() = default;
  explicit Val(Tensor4 tensor) : t(std::move(tensor)) {}
  Val(Tensor4 tensor, int n, GradientGroup* g)
      : t(std::move(tensor)), node(n), owner(g) {}

  bool tracked() const { return node >= 0; }
};

inline Val detach(const Val& v) { return Val(v.t); }

class GradientGroup {
 public:
  explicit GradientGroup(std::string name = "group") : name_(std::move(name)) {}

  GradientGroup(const GradientGroup&) = delete;
  GradientGroup& operator=(const GradientGroup&) = delete;
  GradientGroup(GradientGroup&&) = default;
  GradientGroup& operator=(GradientGroup&&) = default;

  ~GradientGroup() { release_trace(); }

  const std::string& name() const { return name_; }

  // ---- parameters -------------------------------------------------------

  ParamId add_param(std::string pname, Tensor4 init, bool trainable = true) {
    for (const auto& p : params_)
      if (p.name == pname)
        throw std::invalid_argument("GradientGroup '" + name_ +
                                    "': duplicate parameter '" + pname + "'");
    Param p;
    p.name = std::move(pname);
    p.grad = Tensor4::zeros(init.shape());
    p.value = std::move(init);
    p.trainable = trainable;
    params_.push_back(std::move(p));
    return static_cast<ParamId>(params_.size() - 1);
  }

  int param_count() const { return static_cast<int>(params_.size()); }
  const std::string& param_name(ParamId p) const { return at(p).name; }
  bool param_trainable(ParamId p) const { return at(p).trainable; }
  const Tensor4& value(ParamId p) const { return at(p).value; }
  Tensor4& mutable_value(ParamId p) { return at(p).value; }
  const Tensor4& grad(ParamId p) const { return at(p).grad; }
  Tensor4& mutable_grad(ParamId p) { return at(p).grad; }

  void zero_grads() {
    for (auto& p : params_) {
      double* g = p.grad.data();
      for (int64_t i = 0; i < p.grad.elems(); ++i) g[i] = 0.0;
    }
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) {
      if (!p.trainable) continue;
      const double* g = p.grad.data();
      for (int64_t i = 0; i < p.grad.elems(); ++i) s += g[i] * g[i];
    }
    return std::sqrt(s);
  }

  // ---- trace ------------------------------------------------------------

  void begin_recording() {
    release_trace();
    leaf_grads_.clear();
    recording_ = true;
  }

  void stop_recording() { recording_ = false; }
  bool recording() const { return recording_; }

  // Track an input tensor. needs_grad makes backward retain its gradient
  // (queried with leaf_grad after backward).
  Val leaf(const Tensor4& t, bool needs_grad = false) {
    if (!recording_) return Val(t);
    int id = new_node(Node::Kind::leaf);
    nodes_[id].needs_grad = needs_grad;
    return Val(t, id, this);
  }

  // Use a parameter inside the trace; backward accumulates into its grad.
  Val use(ParamId p) {
    if (!recording_) return Val(at(p).value);
    int id = new_node(Node::Kind::param);
    nodes_[id].pid = p;
    nodes_[id].needs_grad = at(p).trainable;
    return Val(at(p).value, id, this);
  }

  // Save a tensor needed by some backward function. Shared storage, so this
  // never copies; it only pins the buffer until the trace is released.
  int save(const Tensor4& t) {
    saved_.push_back(t);
    AllocLedger::on_trace_hold();
    return static_cast<int>(saved_.size() - 1);
  }
  const Tensor4& saved(int slot) const { return saved_[slot]; }

  using BackFn =
      std::function<void(GradientGroup&, const Tensor4& gout)>;

  // Record an op node; `back` propagates gout to the node's inputs via
  // add_grad. Returns the new node id.
  int record(BackFn back) {
    int id = new_node(Node::Kind::op);
    nodes_[id].back = std::move(back);
    return id;
  }

  // True when a gradient flowing to `node` would be consumed by anything.
  bool wants(int node) const {
    if (node < 0) return false;
    const Node& n = nodes_[node];
    if (n.kind == Node::Kind::op) return true;
    return n.needs_grad;
  }

  void add_grad(int node, Tensor4 g) {
    if (node < 0) return;
    auto& slot = grads_[node];
    if (slot.empty())
      slot = std::move(g);
    else
      add_into(slot, g);
  }
  void add_grad(int node, const Tensor4& g, bool) = delete;

  // ---- backward ----------------------------------------------------------

  // Reverse sweep from a scalar loss. Accumulates parameter gradients (+=),
  // stashes leaf gradients for tracked needs_grad leaves, then releases the
  // trace and all interior gradient buffers.
  void backward(const Val& loss) {
    if (!loss.tracked() || loss.owner != this)
      throw std::logic_error("GradientGroup '" + name_ +
                             "': backward on a value it does not own");
    if (loss.node >= static_cast<int>(nodes_.size()))
      throw std::logic_error("GradientGroup '" + name_ +
                             "': backward on a value from a released trace");
    if (loss.t.elems() != 1)
      throw std::invalid_argument("GradientGroup '" + name_ +
                                  "': backward needs a scalar loss, got " +
                                  loss.t.shape().str());
    grads_.assign(nodes_.size(), Tensor4());
    grads_[loss.node] = Tensor4::full(loss.t.shape(), 1.0);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      if (grads_[id].empty()) continue;
      Node& n = nodes_[id];
      if (n.kind == Node::Kind::op) {
        n.back(*this, grads_[id]);
      } else if (n.kind == Node::Kind::param) {
        add_into(params_[n.pid].grad, grads_[id]);
      } else if (n.needs_grad) {
        leaf_grads_[id] = grads_[id];
      }
    }
    release_trace();
  }

  // Gradient of the last backward's loss w.r.t. a needs_grad leaf. Valid
  // until the next begin_recording().
  const Tensor4& leaf_grad(const Val& leaf) const {
    auto it = leaf_grads_.find(leaf.node);
    if (it == leaf_grads_.end())
      throw std::logic_error("GradientGroup '" + name_ +
                             "': no stored gradient for that leaf");
    return it->second;
  }

  void release_trace() {
    if (!saved_.empty())
      AllocLedger::on_trace_release(static_cast<int64_t>(saved_.size()));
    saved_.clear();
    nodes_.clear();
    grads_.clear();
    recording_ = false;
  }

  int trace_nodes() const { return static_cast<int>(nodes_.size()); }
  int trace_saved() const { return static_cast<int>(saved_.size()); }

 private:
  struct Param {
    std::string name;
    Tensor4 value;
    Tensor4 grad;
    bool trainable = true;
  };

  struct Node {
    enum class Kind { op, param, leaf };
    Kind kind = Kind::op;
    ParamId pid = -1;
    bool needs_grad = false;
    BackFn back;
  };

  const Param& at(ParamId p) const {
    if (p < 0 || p >= static_cast<int>(params_.size()))
      throw std::out_of_range("GradientGroup '" + name_ +
                              "': bad parameter id " + std::to_string(p));
    return params_[p];
  }
  Param& at(ParamId p) {
    return const_cast<Param&>(static_cast<const GradientGroup&>(*this).at(p));
  }

  int new_node(Node::Kind k) {
    nodes_.push_back(Node{});
    nodes_.back().kind = k;
    return static_cast<int>(nodes_.size() - 1);
  }

  std::string name_;
  std::vector<Param> params_;
  std::vector<Node> nodes_;
  std::vector<Tensor4> saved_;
  std::vector<Tensor4> grads_;
  std::unordered_map<int, Tensor4> leaf_grads_;
  bool recording_ = false;
};

}  // namespace bicovg
