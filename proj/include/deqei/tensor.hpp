#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deqei {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;
struct TensorData;

// Dense float64 tensor with value semantics over shared storage.
// A tensor produced by a differentiable primitive carries a reference to the
// tape node that produced it; plain values carry none and are safe to share.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  double item() const;  // single-element tensors only
  double at(int64_t i) const;
  std::span<const double> data() const;

  // In-place access for leaves (parameters, buffers). Mutating a tensor that
  // participated in a live tape invalidates that tape's captured values;
  // callers mutate only between training steps.
  std::vector<double>& mutable_values();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool rg);  // leaves only
  Tensor& set_name(std::string name);
  const std::string& name() const;

  // Value-equal copy with no tape history.
  Tensor detach(bool requires_grad = false) const;

  bool on_tape() const;
  std::shared_ptr<Tape> tape() const;
  int node() const;

 private:
  friend class Tape;
  friend class OpRecorder;
  friend Tensor vjp(const Tensor&, const Tensor&, const Tensor&);
  friend bool depends_on(const Tensor&, const Tensor&);
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

struct TensorData {
  Shape shape;
  std::shared_ptr<std::vector<double>> values;
  bool requires_grad = false;
  std::string name;
  std::shared_ptr<Tape> tape;  // set for op outputs
  int node = -1;
};

// Thread-local gradient mode. While disabled, primitives compute values only.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Recorded application of a differentiable primitive. The VJP closure maps
// the upstream gradient to one gradient per recorded parent, in order.
class Tape : public std::enable_shared_from_this<Tape> {
 public:
  using VjpFn = std::function<std::vector<std::vector<double>>(const std::vector<double>&)>;
  using HookFn = std::function<Tensor(const Tensor&)>;

  struct Node {
    const char* op = "";
    Shape shape;
    std::vector<int> parents;
    VjpFn vjp;               // empty for leaves
    bool is_leaf = false;
    std::string leaf_name;   // parameters only
    bool leaf_requires_grad = false;
    std::shared_ptr<TensorData> leaf_data;  // pins registered leaves for the tape's lifetime
  };

  size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[id]; }

  int add_node(Node n);
  int leaf_id(const std::shared_ptr<TensorData>& leaf);
  int find_leaf(const TensorData* leaf) const;  // -1 if absent

  void set_hook(int node_id, HookFn hook);
  const HookFn* hook(int node_id) const;

 private:
  std::vector<Node> nodes_;
  std::map<const TensorData*, int> leaf_ids_;
  std::map<int, HookFn> hooks_;
};

// ---- differentiable primitives ------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scalar_mul(const Tensor& x, double c);
Tensor scalar_mul(const Tensor& x, const Tensor& s);   // s is a 1-element tensor
Tensor add_scalar(const Tensor& x, double c);
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = {});  // stride 1, same-size zero padding
Tensor leaky_relu(const Tensor& x, double slope);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor squared_norm(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor sqrt_elem(const Tensor& x);
Tensor reciprocal(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scalar_mul(x, c); }

// Single-input linear op with caller-supplied value and VJP rules; used by
// the measurement operators and rotations to join the tape.
Tensor custom_linear_op(const Tensor& x, Shape out_shape, std::vector<double> out_values,
                        std::function<std::vector<double>(const std::vector<double>&)> vjp_fn,
                        const char* op_name);

// ---- backward machinery ---------------------------------------------------

using GradMap = std::map<std::string, Tensor>;

// Gradients of a scalar loss with respect to every reachable named parameter.
GradMap backward(const Tensor& loss);

// vector^T (d output / d input), shaped like input. Leaves accumulated
// parameter gradients untouched.
Tensor vjp(const Tensor& output, const Tensor& input, const Tensor& vector);

bool depends_on(const Tensor& output, const Tensor& input);

// During backward, the upstream gradient arriving at x is replaced by
// hook(g). One hook per tensor.
void register_hook(const Tensor& x, Tape::HookFn hook);

// ---- parameters ------------------------------------------------------------

// Named trainable tensors plus non-trainable buffers (e.g. power-iteration
// start vectors). Flatten/unflatten covers trainable parameters only and is
// a bijection.
class ParameterSet {
 public:
  Tensor& create(const std::string& name, Shape shape);
  void add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  Tensor& create_buffer(const std::string& name, Shape shape);
  void add_buffer(const std::string& name, Tensor t);
  Tensor& buffer(const std::string& name);
  const Tensor& buffer(const std::string& name) const;
  bool has_buffer(const std::string& name) const;

  int64_t total_count() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> buffers_;
};

}  // namespace deqei
