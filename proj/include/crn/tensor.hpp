#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace crn {

// Invalid run/model configuration. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values in a numeric path (loss, gradients). CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <class T>
class Tape;

// Dense row-major tensor of rank 1..3. Copies share the underlying buffer,
// so passing tensors by value is cheap; ops never mutate their inputs.
template <class T>
struct TensorT {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  int tape_id = -1;                  // node handle on `tape_owner`
  const void* tape_owner = nullptr;  // tape the handle belongs to

  TensorT() = default;

  TensorT(std::vector<int> shp, std::vector<T> values) : shape(std::move(shp)) {
    validate_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    data = std::make_shared<std::vector<T>>(std::move(values));
  }

  static TensorT zeros(std::vector<int> shp) {
    validate_shape(shp);
    TensorT t;
    t.data = std::make_shared<std::vector<T>>(numel_of(shp), T(0));
    t.shape = std::move(shp);
    return t;
  }

  static TensorT full(std::vector<int> shp, T v) {
    TensorT t = zeros(std::move(shp));
    for (auto& x : *t.data) x = v;
    return t;
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int axis) const { return shape[static_cast<std::size_t>(axis)]; }
  std::int64_t numel() const { return numel_of(shape); }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }

  T& operator()(int i) { return (*data)[static_cast<std::size_t>(i)]; }
  T operator()(int i) const { return (*data)[static_cast<std::size_t>(i)]; }
  T& operator()(int i, int j) {
    return (*data)[static_cast<std::size_t>(i) * shape[1] + j];
  }
  T operator()(int i, int j) const {
    return (*data)[static_cast<std::size_t>(i) * shape[1] + j];
  }
  T& operator()(int i, int j, int k) {
    return (*data)[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T operator()(int i, int j, int k) const {
    return (*data)[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  static std::int64_t numel_of(const std::vector<int>& shp) {
    std::int64_t n = 1;
    for (int d : shp) n *= d;
    return n;
  }

  static void validate_shape(const std::vector<int>& shp) {
    if (shp.empty() || shp.size() > 3) {
      throw std::invalid_argument("tensor: rank must be 1..3, got shape " +
                                  shape_str(shp));
    }
    for (int d : shp) {
      if (d <= 0) {
        throw std::invalid_argument("tensor: non-positive dimension in " +
                                    shape_str(shp));
      }
    }
  }
};

// A named trainable tensor.
template <class T>
struct Parameter {
  std::string name;
  TensorT<T> tensor;
};

// Reverse-mode gradient tape. Ops executed under an active TapeScope append
// nodes; backward() replays them in reverse and accumulates gradients.
// Single use: one backward per tape, no higher-order gradients.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Node handle for a tensor. Registers requires_grad tensors as leaves the
  // first time they are seen; returns -1 for untracked constants.
  int node_of(const TensorT<T>& t) {
    if (t.tape_owner == this && t.tape_id >= 0) return t.tape_id;
    if (!t.requires_grad || !t.data) return -1;
    const void* key = static_cast<const void*>(t.data.get());
    auto it = leaves_.find(key);
    if (it != leaves_.end()) return it->second;
    const int id = add_node(nullptr);
    leaves_.emplace(key, id);
    return id;
  }

  int add_node(std::function<void()> fn) {
    nodes_.push_back(std::move(fn));
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Install the backward closure after the node id is known (closures need
  // their own output id to fetch the incoming gradient).
  void set_backward(int id, std::function<void()> fn) {
    nodes_[static_cast<std::size_t>(id)] = std::move(fn);
  }

  std::vector<T>* grad_buf(int id) {
    return grads_[static_cast<std::size_t>(id)].get();
  }

  // Gradient buffer for accumulation, zero-allocated on first touch.
  std::vector<T>& accum(int id, std::int64_t numel) {
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot) slot = std::make_unique<std::vector<T>>(numel, T(0));
    return *slot;
  }

  void backward(const TensorT<T>& loss) {
    if (used_) {
      throw std::logic_error("backward: tape already consumed; build a fresh "
                             "tape for the next forward/backward cycle");
    }
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got " +
                                  shape_str(loss.shape));
    }
    const int id = (loss.tape_owner == this) ? loss.tape_id : -1;
    if (id < 0) {
      throw std::invalid_argument("backward: loss is not recorded on this tape");
    }
    used_ = true;
    accum(id, 1)[0] = T(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      const auto idx = static_cast<std::size_t>(i);
      if (grads_[idx] && nodes_[idx]) nodes_[idx]();
    }
  }

  // Gradient of a tensor after backward; nullptr when nothing reached it.
  const std::vector<T>* grad_of(const TensorT<T>& t) const {
    int id = -1;
    if (t.tape_owner == this && t.tape_id >= 0) {
      id = t.tape_id;
    } else if (t.data) {
      auto it = leaves_.find(static_cast<const void*>(t.data.get()));
      if (it != leaves_.end()) id = it->second;
    }
    if (id < 0) return nullptr;
    return grads_[static_cast<std::size_t>(id)].get();
  }

  bool consumed() const { return used_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::unique_ptr<std::vector<T>>> grads_;
  std::unordered_map<const void*, int> leaves_;
  bool used_ = false;
};

namespace detail {
template <class T>
inline Tape<T>*& active_tape_slot() {
  static thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace detail

template <class T>
inline Tape<T>* active_tape() {
  return detail::active_tape_slot<T>();
}

// RAII activation of a tape on the current thread. Ops record onto the
// innermost active tape; without one they run as pure functions.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = &t;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace crn
