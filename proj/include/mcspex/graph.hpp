// Copyright (c) 2026 The mcspex Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MCSPEX_GRAPH_HPP_
#define MCSPEX_GRAPH_HPP_

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mcspex/common.hpp"
#include "mcspex/tensor.hpp"

namespace mcspex {

template <typename T>
class Graph;

// Lightweight handle to a node of a Graph.
template <typename T>
struct Value {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor<T>& tensor() const;
  const Shape& shape() const { return tensor().shape(); }
  T item() const;
};

// Trainable tensor with persistent gradient storage. Parameters are owned
// by a ParameterRegistry; a parameter used from several call sites appears
// once in the registry and once per graph.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
class ParameterRegistry {
 public:
  Parameter<T>& create(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) {
      throw ConfigError("duplicate parameter name '" + name + "'");
    }
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(init.shape());
    p->value = std::move(init);
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }

  // Registration order is the canonical order for checkpoints.
  const std::vector<std::unique_ptr<Parameter<T>>>& items() const {
    return items_;
  }
  std::size_t count() const { return items_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p->value.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : items_) p->grad.fill(T(0));
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

// Reverse-mode tape over one forward pass. Nodes are immutable once
// written; ops append nodes, backward() replays the tape in reverse.
// Only first-order gradients are supported.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily on first contribution
    std::function<void()> backward;
    bool requires_grad = false;
    const char* op = "";
  };

  explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Value<T> constant(Tensor<T> v) {
    return append("constant", std::move(v), false, {});
  }

  // Leaf whose gradient is wanted (gradcheck inputs).
  Value<T> input(Tensor<T> v) {
    return append("input", std::move(v), true, {});
  }

  // Leaf bound to a registry parameter; memoized so that every use of the
  // same parameter within this graph resolves to one node and gradients
  // from all call sites accumulate together.
  Value<T> use(Parameter<T>& p) {
    auto it = param_index_.find(&p);
    if (it != param_index_.end()) return {this, it->second};
    Value<T> v = append(p.name.c_str(), p.value, true, {});
    param_index_[&p] = v.id;
    param_nodes_.emplace_back(&p, v.id);
    return v;
  }

  // Appends an op node; the backward closure is attached afterwards via
  // set_backward so that it can capture the output id.
  Value<T> make(const char* op, Tensor<T> v, const std::vector<int>& parents) {
    bool needs = false;
    for (int pid : parents) {
      if (node(pid).requires_grad) needs = true;
    }
    return append(op, std::move(v), needs, parents);
  }

  void set_backward(Value<T> v, std::function<void()> bw) {
    Node& n = node(v.id);
    if (n.requires_grad) n.backward = std::move(bw);
  }

  Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(int id) const {
    return nodes_.at(static_cast<std::size_t>(id));
  }
  std::size_t num_nodes() const { return nodes_.size(); }

  // Gradient buffer of `id`, or nullptr if that node does not need one.
  // The buffer is zero-initialized on first request.
  Tensor<T>* grad_target(int id) {
    Node& n = node(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  const Tensor<T>& grad_of(int id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  const Tensor<T>& grad_of(Value<T> v) { return grad_of(v.id); }

  // Runs reverse-mode accumulation from a scalar root.
  void backward(Value<T> root) {
    if (root.graph != this) throw UsageError("backward: foreign value");
    Node& r = node(root.id);
    if (r.value.size() != 1) {
      throw UsageError("backward requires a scalar root, got shape " +
                       shape_str(r.value.shape()));
    }
    if (Tensor<T>* g = grad_target(root.id)) (*g)[0] = T(1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = node(id);
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward();
    }
  }

  // Adds the tape gradients of parameter leaves into Parameter::grad.
  void write_param_grads() {
    for (auto& [param, id] : param_nodes_) {
      const Node& n = node(id);
      if (n.grad.empty()) continue;
      T* dst = param->grad.data();
      const T* src = n.grad.data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
    }
  }

  bool check_finite() const { return check_finite_; }

 private:
  Value<T> append(const char* op, Tensor<T> v, bool requires_grad,
                  const std::vector<int>& parents) {
    if (check_finite_ && !all_finite(v.data(), v.size())) {
      throw NumericError(detail::cat("non-finite output of op '", op, "'"));
    }
    for (int pid : parents) {
      if (pid < 0 || pid >= static_cast<int>(nodes_.size())) {
        throw UsageError("op parent out of range");
      }
    }
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.op = op;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
  std::vector<std::pair<Parameter<T>*, int>> param_nodes_;
  std::unordered_map<const Parameter<T>*, int> param_index_;
  bool check_finite_;
};

template <typename T>
const Tensor<T>& Value<T>::tensor() const {
  return graph->node(id).value;
}

template <typename T>
T Value<T>::item() const {
  const Tensor<T>& t = tensor();
  if (t.size() != 1) {
    throw UsageError("item() on non-scalar value " + shape_str(t.shape()));
  }
  return t[0];
}

namespace detail {

// dst += src, elementwise.
template <typename T>
void axpy_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace detail

}  // namespace mcspex

#endif  // MCSPEX_GRAPH_HPP_
