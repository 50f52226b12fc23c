#include "taskemb/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "taskemb/common.hpp"

namespace taskemb::ad {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "," + std::to_string(c) + "]";
}

std::string shape_str(const Tensor& t) { return shape_str(t.rows(), t.cols()); }

NodePtr make_node(const char* op, std::size_t rows, std::size_t cols,
                  std::vector<NodePtr> inputs) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->rows = rows;
  n->cols = cols;
  n->value.assign(rows * cols, 0.0);
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs) {
    if (in->requires_grad) n->requires_grad = true;
  }
  return n;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(op, shape_str(a), shape_str(b));
  }
}

}  // namespace

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.assign(rows * cols, 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(std::size_t rows, std::size_t cols, std::vector<double> data,
                    bool requires_grad) {
  if (data.size() != rows * cols) {
    throw DimensionError("from", shape_str(rows, cols),
                         "flat size " + std::to_string(data.size()));
  }
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from(1, 1, {v}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item", "[1,1]", shape_str(*this));
  return node_->value[0];
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias_row = b.rows() == 1 && a.cols() == b.cols() && a.rows() != 1;
  if (!bias_row) require_same_shape("add", a, b);
  auto n = make_node("add", a.rows(), a.cols(), {a.node(), b.node()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) {
      n->value[r * a.cols() + c] = a.at(r, c) + b.at(bias_row ? 0 : r, c);
    }
  }
  n->pull = [bias_row](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    for (std::size_t i = 0; i < self.size(); ++i) x.grad[i] += self.grad[i];
    if (bias_row) {
      for (std::size_t r = 0; r < self.rows; ++r) {
        for (std::size_t c = 0; c < self.cols; ++c) {
          y.grad[c] += self.grad[r * self.cols + c];
        }
      }
    } else {
      for (std::size_t i = 0; i < self.size(); ++i) y.grad[i] += self.grad[i];
    }
  };
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto n = make_node("sub", a.rows(), a.cols(), {a.node(), b.node()});
  for (std::size_t i = 0; i < n->size(); ++i) n->value[i] = a.value()[i] - b.value()[i];
  n->pull = [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    for (std::size_t i = 0; i < self.size(); ++i) {
      x.grad[i] += self.grad[i];
      y.grad[i] -= self.grad[i];
    }
  };
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto n = make_node("mul", a.rows(), a.cols(), {a.node(), b.node()});
  for (std::size_t i = 0; i < n->size(); ++i) n->value[i] = a.value()[i] * b.value()[i];
  n->pull = [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    for (std::size_t i = 0; i < self.size(); ++i) {
      x.grad[i] += self.grad[i] * y.value[i];
      y.grad[i] += self.grad[i] * x.value[i];
    }
  };
  return Tensor(n);
}

Tensor scale(const Tensor& a, double s) {
  auto n = make_node("scale", a.rows(), a.cols(), {a.node()});
  for (std::size_t i = 0; i < n->size(); ++i) n->value[i] = a.value()[i] * s;
  n->pull = [s](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t i = 0; i < self.size(); ++i) x.grad[i] += self.grad[i] * s;
  };
  return Tensor(n);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul", shape_str(a), shape_str(b));
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  auto n = make_node("matmul", m, p, {a.node(), b.node()});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < k; ++j) {
      const double av = a.at(r, j);
      for (std::size_t c = 0; c < p; ++c) n->value[r * p + c] += av * b.at(j, c);
    }
  }
  n->pull = [m, k, p](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    // dX = dZ * Y^T ; dY = X^T * dZ
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < p; ++c) acc += self.grad[r * p + c] * y.value[j * p + c];
        x.grad[r * k + j] += acc;
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t c = 0; c < p; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < m; ++r) acc += x.value[r * k + j] * self.grad[r * p + c];
        y.grad[j * p + c] += acc;
      }
    }
  };
  return Tensor(n);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt", shape_str(a), shape_str(b));
  const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
  auto n = make_node("matmul_nt", m, p, {a.node(), b.node()});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < p; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += a.at(r, j) * b.at(c, j);
      n->value[r * p + c] = acc;
    }
  }
  n->pull = [m, k, p](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    // Z = X Y^T : dX = dZ * Y ; dY = dZ^T * X
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < p; ++c) acc += self.grad[r * p + c] * y.value[c * k + j];
        x.grad[r * k + j] += acc;
      }
    }
    for (std::size_t c = 0; c < p; ++c) {
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < m; ++r) acc += self.grad[r * p + c] * x.value[r * k + j];
        y.grad[c * k + j] += acc;
      }
    }
  };
  return Tensor(n);
}

Tensor transpose(const Tensor& a) {
  auto n = make_node("transpose", a.cols(), a.rows(), {a.node()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) n->value[c * a.rows() + r] = a.at(r, c);
  }
  n->pull = [](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t r = 0; r < self.rows; ++r) {
      for (std::size_t c = 0; c < self.cols; ++c) {
        x.grad[c * self.rows + r] += self.grad[r * self.cols + c];
      }
    }
  };
  return Tensor(n);
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > a.rows()) {
    throw DimensionError("slice_rows", "rows in [0," + std::to_string(a.rows()) + "]",
                         std::to_string(r0) + ".." + std::to_string(r1));
  }
  auto n = make_node("slice_rows", r1 - r0, a.cols(), {a.node()});
  std::copy(a.value().begin() + r0 * a.cols(), a.value().begin() + r1 * a.cols(),
            n->value.begin());
  n->pull = [r0](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t i = 0; i < self.size(); ++i) x.grad[r0 * self.cols + i] += self.grad[i];
  };
  return Tensor(n);
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > a.cols()) {
    throw DimensionError("slice_cols", "cols in [0," + std::to_string(a.cols()) + "]",
                         std::to_string(c0) + ".." + std::to_string(c1));
  }
  const std::size_t w = c1 - c0;
  auto n = make_node("slice_cols", a.rows(), w, {a.node()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < w; ++c) n->value[r * w + c] = a.at(r, c0 + c);
  }
  n->pull = [c0, w](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t r = 0; r < self.rows; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        x.grad[r * x.cols + c0 + c] += self.grad[r * w + c];
      }
    }
  };
  return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols of zero tensors");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols", shape_str(parts[0]), shape_str(p));
    cols += p.cols();
    inputs.push_back(p.node());
  }
  auto n = make_node("concat_cols", rows, cols, std::move(inputs));
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < p.cols(); ++c) n->value[r * cols + off + c] = p.at(r, c);
    }
    off += p.cols();
  }
  n->pull = [cols](Node& self) {
    std::size_t off = 0;
    for (auto& in : self.inputs) {
      for (std::size_t r = 0; r < self.rows; ++r) {
        for (std::size_t c = 0; c < in->cols; ++c) {
          in->grad[r * in->cols + c] += self.grad[r * cols + off + c];
        }
      }
      off += in->cols;
    }
  };
  return Tensor(n);
}

Tensor sum_all(const Tensor& a) {
  auto n = make_node("sum_all", 1, 1, {a.node()});
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  n->value[0] = acc;
  n->pull = [](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += self.grad[0];
  };
  return Tensor(n);
}

Tensor mean_rows(const Tensor& a) {
  auto n = make_node("mean_rows", 1, a.cols(), {a.node()});
  const double inv = 1.0 / double(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) n->value[c] += a.at(r, c) * inv;
  }
  n->pull = [inv](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t r = 0; r < x.rows; ++r) {
      for (std::size_t c = 0; c < x.cols; ++c) x.grad[r * x.cols + c] += self.grad[c] * inv;
    }
  };
  return Tensor(n);
}

namespace {

// Shared forward for (log_)softmax; max-shifted for stability.
void softmax_forward(const Tensor& a, std::vector<double>& out, bool log_form) {
  const std::size_t R = a.rows(), C = a.cols();
  for (std::size_t r = 0; r < R; ++r) {
    double mx = a.at(r, 0);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, a.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(a.at(r, c) - mx);
    const double lz = std::log(z);
    for (std::size_t c = 0; c < C; ++c) {
      const double sh = a.at(r, c) - mx;
      out[r * C + c] = log_form ? sh - lz : std::exp(sh - lz);
    }
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  auto n = make_node("softmax_rows", a.rows(), a.cols(), {a.node()});
  softmax_forward(a, n->value, false);
  n->pull = [](Node& self) {
    Node& x = *self.inputs[0];
    const std::size_t C = self.cols;
    for (std::size_t r = 0; r < self.rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += self.grad[r * C + c] * self.value[r * C + c];
      for (std::size_t c = 0; c < C; ++c) {
        x.grad[r * C + c] += self.value[r * C + c] * (self.grad[r * C + c] - dot);
      }
    }
  };
  return Tensor(n);
}

Tensor log_softmax_rows(const Tensor& a) {
  auto n = make_node("log_softmax_rows", a.rows(), a.cols(), {a.node()});
  softmax_forward(a, n->value, true);
  n->pull = [](Node& self) {
    Node& x = *self.inputs[0];
    const std::size_t C = self.cols;
    for (std::size_t r = 0; r < self.rows; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < C; ++c) gsum += self.grad[r * C + c];
      for (std::size_t c = 0; c < C; ++c) {
        x.grad[r * C + c] += self.grad[r * C + c] - std::exp(self.value[r * C + c]) * gsum;
      }
    }
  };
  return Tensor(n);
}

Tensor log(const Tensor& a) {
  auto n = make_node("log", a.rows(), a.cols(), {a.node()});
  for (std::size_t i = 0; i < n->size(); ++i) {
    if (a.value()[i] <= 0.0) throw ValidationError("log of non-positive value");
    n->value[i] = std::log(a.value()[i]);
  }
  n->pull = [](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t i = 0; i < self.size(); ++i) x.grad[i] += self.grad[i] / x.value[i];
  };
  return Tensor(n);
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  auto n = make_node("gelu", a.rows(), a.cols(), {a.node()});
  for (std::size_t i = 0; i < n->size(); ++i) {
    const double x = a.value()[i];
    n->value[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  n->pull = [](Node& self) {
    Node& xn = *self.inputs[0];
    for (std::size_t i = 0; i < self.size(); ++i) {
      const double x = xn.value[i];
      const double u = kC * (x + kA * x * x * x);
      const double t = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * x * x);
      const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      xn.grad[i] += self.grad[i] * d;
    }
  };
  return Tensor(n);
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  const std::size_t C = a.cols();
  if (gain.rows() != 1 || gain.cols() != C) {
    throw DimensionError("layer_norm gain", shape_str(1, C), shape_str(gain));
  }
  if (bias.rows() != 1 || bias.cols() != C) {
    throw DimensionError("layer_norm bias", shape_str(1, C), shape_str(bias));
  }
  auto n = make_node("layer_norm_rows", a.rows(), C, {a.node(), gain.node(), bias.node()});
  // Cache per-row mean and inverse stddev for the pull-back.
  auto stats = std::make_shared<std::vector<double>>(2 * a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += a.at(r, c);
    mu /= double(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = a.at(r, c) - mu;
      var += d * d;
    }
    var /= double(C);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    (*stats)[2 * r] = mu;
    (*stats)[2 * r + 1] = inv;
    for (std::size_t c = 0; c < C; ++c) {
      n->value[r * C + c] = (a.at(r, c) - mu) * inv * gain.at(0, c) + bias.at(0, c);
    }
  }
  n->pull = [stats](Node& self) {
    Node& x = *self.inputs[0];
    Node& g = *self.inputs[1];
    Node& b = *self.inputs[2];
    const std::size_t C = self.cols;
    for (std::size_t r = 0; r < self.rows; ++r) {
      const double mu = (*stats)[2 * r];
      const double inv = (*stats)[2 * r + 1];
      double sum_dy_g = 0.0, sum_dy_g_xhat = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double xhat = (x.value[r * C + c] - mu) * inv;
        const double dy = self.grad[r * C + c];
        g.grad[c] += dy * xhat;
        b.grad[c] += dy;
        const double dyg = dy * g.value[c];
        sum_dy_g += dyg;
        sum_dy_g_xhat += dyg * xhat;
      }
      for (std::size_t c = 0; c < C; ++c) {
        const double xhat = (x.value[r * C + c] - mu) * inv;
        const double dyg = self.grad[r * C + c] * g.value[c];
        x.grad[r * C + c] +=
            inv * (dyg - sum_dy_g / double(C) - xhat * sum_dy_g_xhat / double(C));
      }
    }
  };
  return Tensor(n);
}

Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  const std::size_t C = table.cols();
  auto n = make_node("embedding_gather", ids.size(), C, {table.node()});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || std::size_t(ids[r]) >= table.rows()) {
      throw ValidationError("embedding id " + std::to_string(ids[r]) + " out of range [0," +
                            std::to_string(table.rows()) + ")");
    }
    std::copy(table.value().begin() + std::size_t(ids[r]) * C,
              table.value().begin() + (std::size_t(ids[r]) + 1) * C, n->value.begin() + r * C);
  }
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  n->pull = [ids_copy](Node& self) {
    Node& t = *self.inputs[0];
    const std::size_t C = self.cols;
    for (std::size_t r = 0; r < self.rows; ++r) {
      const std::size_t row = std::size_t((*ids_copy)[r]);
      for (std::size_t c = 0; c < C; ++c) t.grad[row * C + c] += self.grad[r * C + c];
    }
  };
  return Tensor(n);
}

Tensor pick(const Tensor& a, std::size_t r, std::size_t c) {
  if (r >= a.rows() || c >= a.cols()) {
    throw DimensionError("pick", shape_str(a), "(" + std::to_string(r) + "," + std::to_string(c) + ")");
  }
  auto n = make_node("pick", 1, 1, {a.node()});
  n->value[0] = a.at(r, c);
  n->pull = [r, c](Node& self) {
    Node& x = *self.inputs[0];
    x.grad[r * x.cols + c] += self.grad[0];
  };
  return Tensor(n);
}

Tensor pick_rows(const Tensor& a, const std::vector<int>& cols) {
  if (cols.size() != a.rows()) {
    throw DimensionError("pick_rows", std::to_string(a.rows()) + " indices",
                         std::to_string(cols.size()));
  }
  auto n = make_node("pick_rows", a.rows(), 1, {a.node()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    if (cols[r] < 0 || std::size_t(cols[r]) >= a.cols()) {
      throw ValidationError("pick_rows index out of range");
    }
    n->value[r] = a.at(r, std::size_t(cols[r]));
  }
  auto cols_copy = std::make_shared<std::vector<int>>(cols);
  n->pull = [cols_copy](Node& self) {
    Node& x = *self.inputs[0];
    for (std::size_t r = 0; r < self.rows; ++r) {
      x.grad[r * x.cols + std::size_t((*cols_copy)[r])] += self.grad[r];
    }
  };
  return Tensor(n);
}

Tensor nll_row(const Tensor& logits, std::size_t r, std::size_t target) {
  return scale(pick(log_softmax_rows(logits), r, target), -1.0);
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw DimensionError("backward", "[1,1] loss", std::to_string(loss.rows()) + "x" +
                                                        std::to_string(loss.cols()));
  }
  // Iterative DFS postorder = topological order of the DAG.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Fresh pass: zero every reachable grad before accumulation.
  for (Node* n : order) n->grad.assign(n->size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->pull && (*it)->requires_grad) (*it)->pull(**it);
  }
}

}  // namespace taskemb::ad
