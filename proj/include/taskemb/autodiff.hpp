#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

// Reverse-mode automatic differentiation on dense 2-D tensors of 64-bit
// reals. Each operation records a node holding its inputs and a pull-back
// closure; backward() replays the recorded graph once in reverse
// topological order. Everything is deterministic: no threading inside a
// graph, no reordered reductions.
namespace taskemb::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;       // row-major, rows*cols
  std::vector<double> grad;        // allocated lazily by backward()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  // Pulls this node's grad into inputs' grads. Null for leaves.
  std::function<void(Node&)> pull;

  std::size_t size() const { return rows * cols; }
  double at(std::size_t r, std::size_t c) const { return value[r * cols + c]; }
};

// Value-semantic handle to a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  double at(std::size_t r, std::size_t c) const { return node_->at(r, c); }
  double item() const;  // 1x1 only
  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// Primitives. All validate shapes and throw DimensionError on mismatch.
Tensor add(const Tensor& a, const Tensor& b);       // same shape, or b is 1xC bias row
Tensor sub(const Tensor& a, const Tensor& b);       // same shape
Tensor mul(const Tensor& a, const Tensor& b);       // elementwise, same shape
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);    // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b); // [m,k]x[n,k]^T -> [m,n]
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor sum_all(const Tensor& a);                    // -> 1x1
Tensor mean_rows(const Tensor& a);                  // column means -> 1xC
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor log(const Tensor& a);                        // elementwise, domain > 0
Tensor gelu(const Tensor& a);                       // tanh approximation
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias);
Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids);
Tensor pick(const Tensor& a, std::size_t r, std::size_t c);          // -> 1x1
Tensor pick_rows(const Tensor& a, const std::vector<int>& cols);     // -> Lx1

// Composite convenience: -log_softmax(a)[r, target].
Tensor nll_row(const Tensor& logits, std::size_t r, std::size_t target);

inline constexpr double kLayerNormEps = 1e-5;

// Reverse pass from a 1x1 loss. Zeroes grads of every reachable node, seeds
// d(loss)/d(loss) = 1, then pulls each node's grad exactly once.
void backward(const Tensor& loss);

}  // namespace taskemb::ad
