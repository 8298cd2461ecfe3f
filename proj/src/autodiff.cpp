#include "pcstyle/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "pcstyle/error.hpp"
#include "pcstyle/kernels.hpp"

namespace pcstyle::ad {

Tensor& Node::ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
    if (node_->grad.shape() == node_->value.shape()) return node_->grad;
    return Tensor(node_->value.shape(), 0.0);
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    const bool needs = std::any_of(parents.begin(), parents.end(),
                                   [](const Var& p) { return p.defined() && p.requires_grad(); });
    if (needs) {
        node->requires_grad = true;
        for (auto& p : parents) node->parents.push_back(p.defined() ? p.node() : nullptr);
        node->backward_fn = std::move(backward);
    }
    return Var(std::move(node));
}

void backward(const Var& root) {
    if (root.value().size() != 1) {
        throw Error(ErrorCode::ShapeMismatch, "backward() needs a scalar root, got " + shape_string(root.shape()));
    }
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p != nullptr && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward_fn || node->grad.shape() != node->value.shape()) continue;
        node->backward_fn(*node);
        // Interior gradients are not needed once pushed to parents.
        node->grad = Tensor();
    }
}

namespace {

void require_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorCode::ShapeMismatch,
                    std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

void require_rank(const Var& a, int rank, const char* op) {
    if (a.value().rank() != rank) {
        throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": expected rank " + std::to_string(rank) +
                                                  ", got " + shape_string(a.shape()));
    }
}

Node* parent(Node& out, std::size_t i) {
    Node* p = out.parents[i].get();
    return (p != nullptr && p->requires_grad) ? p : nullptr;
}

// Unfolds x[C,H,W] into cols[C*k*k, oh*ow].
void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow, double* cols) {
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + (static_cast<std::size_t>(ch * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    double* dst = row + static_cast<std::size_t>(oy) * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + ow, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(ch) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates cols back into x.
void col2im(const double* cols, int c, int h, int w, int k, int stride, int pad, int oh, int ow, double* x) {
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + (static_cast<std::size_t>(ch * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = x + (static_cast<std::size_t>(ch) * h + iy) * w;
                    const double* src = row + static_cast<std::size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    Tensor out = a.value();
    out += b.value();
    return make_op(std::move(out), {a, b}, [](Node& o) {
        for (std::size_t i = 0; i < 2; ++i)
            if (Node* p = parent(o, i)) p->ensure_grad() += o.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        if (Node* p = parent(o, 0)) p->ensure_grad() += o.grad;
        if (Node* p = parent(o, 1)) {
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& o) {
        Node* pa = o.parents[0].get();
        Node* pb = o.parents[1].get();
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->value[i];
        }
        if (Node* p = parent(o, 1)) {
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    out *= s;
    return make_op(std::move(out), {a}, [s](Node& o) {
        if (Node* p = parent(o, 0)) kernels::axpy(s, o.grad.ptr(), p->ensure_grad().ptr(), o.grad.size());
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data()) v += s;
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Node* p = parent(o, 0)) p->ensure_grad() += o.grad;
    });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (o.value[i] > 0.0) g[i] += o.grad[i];
        }
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.value[i] * (1.0 - o.value[i]);
        }
    });
}

Var square(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data()) v *= v;
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p->value[i] * o.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return make_op(Tensor::scalar(s), {a}, [](Node& o) {
        if (Node* p = parent(o, 0)) {
            const double g0 = o.grad[0];
            for (double& g : p->ensure_grad().data()) g += g0;
        }
    });
}

Var mean(const Var& a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw Error(ErrorCode::ShapeMismatch, "mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return make_op(std::move(out), {a}, [](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Matrices

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) {
        throw Error(ErrorCode::ShapeMismatch, "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    Tensor out({n, m}, 0.0);
    kernels::gemm(n, m, k, a.value().ptr(), k, b.value().ptr(), m, out.ptr(), m);
    return make_op(std::move(out), {a, b}, [n, k, m](Node& o) {
        Node* pa = o.parents[0].get();
        Node* pb = o.parents[1].get();
        if (Node* p = parent(o, 0)) kernels::gemm_nt(n, k, m, o.grad.ptr(), pb->value.ptr(), p->ensure_grad().ptr());
        if (Node* p = parent(o, 1)) kernels::gemm_tn(k, m, n, pa->value.ptr(), o.grad.ptr(), p->ensure_grad().ptr());
    });
}

Var transpose(const Var& a) {
    require_rank(a, 2, "transpose");
    const int n = a.shape()[0], m = a.shape()[1];
    Tensor out({m, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(j, i) = a.value().at(i, j);
    return make_op(std::move(out), {a}, [n, m](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) g.at(i, j) += o.grad.at(j, i);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const int n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
    if (w.shape()[1] != in) {
        throw Error(ErrorCode::ShapeMismatch, "linear: input " + shape_string(x.shape()) + " weight " +
                                                  shape_string(w.shape()));
    }
    if (bias.defined() && bias.shape() != Shape{out_dim}) {
        throw Error(ErrorCode::ShapeMismatch, "linear: bias " + shape_string(bias.shape()));
    }
    Tensor out({n, out_dim}, 0.0);
    kernels::gemm_nt(n, out_dim, in, x.value().ptr(), w.value().ptr(), out.ptr());
    if (bias.defined()) {
        for (int i = 0; i < n; ++i) kernels::axpy(1.0, bias.value().ptr(), out.ptr() + static_cast<std::size_t>(i) * out_dim, out_dim);
    }
    std::vector<Var> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents), [n, in, out_dim](Node& o) {
        Node* px = o.parents[0].get();
        Node* pw = o.parents[1].get();
        // dX[n,in] = dY[n,out] * W[out,in]
        if (Node* p = parent(o, 0)) kernels::gemm(n, in, out_dim, o.grad.ptr(), out_dim, pw->value.ptr(), in, p->ensure_grad().ptr(), in);
        // dW[out,in] = dY^T[out,n] * X[n,in]
        if (Node* p = parent(o, 1)) kernels::gemm_tn(out_dim, in, n, o.grad.ptr(), px->value.ptr(), p->ensure_grad().ptr());
        if (o.parents.size() > 2) {
            if (Node* p = parent(o, 2)) {
                double* g = p->ensure_grad().ptr();
                for (int i = 0; i < n; ++i) kernels::axpy(1.0, o.grad.ptr() + static_cast<std::size_t>(i) * out_dim, g, out_dim);
            }
        }
    });
}

namespace {

Var add_row_signed(const Var& a, const Var& row, double sign) {
    require_rank(a, 2, "add_row");
    const int n = a.shape()[0], m = a.shape()[1];
    if (row.value().size() != static_cast<std::size_t>(m)) {
        throw Error(ErrorCode::ShapeMismatch, "add_row: " + shape_string(a.shape()) + " row " + shape_string(row.shape()));
    }
    Tensor out = a.value();
    for (int i = 0; i < n; ++i) kernels::axpy(sign, row.value().ptr(), out.ptr() + static_cast<std::size_t>(i) * m, m);
    return make_op(std::move(out), {a, row}, [n, m, sign](Node& o) {
        if (Node* p = parent(o, 0)) p->ensure_grad() += o.grad;
        if (Node* p = parent(o, 1)) {
            double* g = p->ensure_grad().ptr();
            for (int i = 0; i < n; ++i) kernels::axpy(sign, o.grad.ptr() + static_cast<std::size_t>(i) * m, g, m);
        }
    });
}

}  // namespace

Var add_row(const Var& a, const Var& row) { return add_row_signed(a, row, 1.0); }
Var sub_row(const Var& a, const Var& row) { return add_row_signed(a, row, -1.0); }

Var col_mean(const Var& a) {
    require_rank(a, 2, "col_mean");
    const int n = a.shape()[0], m = a.shape()[1];
    if (n == 0) throw Error(ErrorCode::ShapeMismatch, "col_mean of zero rows");
    Tensor out({m}, 0.0);
    for (int i = 0; i < n; ++i) kernels::axpy(1.0, a.value().ptr() + static_cast<std::size_t>(i) * m, out.ptr(), m);
    out *= 1.0 / n;
    return make_op(std::move(out), {a}, [n, m](Node& o) {
        if (Node* p = parent(o, 0)) {
            double* g = p->ensure_grad().ptr();
            for (int i = 0; i < n; ++i) kernels::axpy(1.0 / n, o.grad.ptr(), g + static_cast<std::size_t>(i) * m, m);
        }
    });
}

Var max_rows(const Var& a) {
    require_rank(a, 2, "max_rows");
    const int n = a.shape()[0], m = a.shape()[1];
    if (n == 0) throw Error(ErrorCode::ShapeMismatch, "max_rows of zero rows");
    Tensor out({m});
    std::vector<int> arg(static_cast<std::size_t>(m), 0);
    for (int j = 0; j < m; ++j) {
        double best = a.value().at(0, j);
        for (int i = 1; i < n; ++i) {
            const double v = a.value().at(i, j);
            if (v > best) {
                best = v;
                arg[static_cast<std::size_t>(j)] = i;
            }
        }
        out[static_cast<std::size_t>(j)] = best;
    }
    return make_op(std::move(out), {a}, [arg = std::move(arg), m](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (int j = 0; j < m; ++j) g.at(arg[static_cast<std::size_t>(j)], j) += o.grad[static_cast<std::size_t>(j)];
        }
    });
}

Var concat_cols(const Var& a, const Var& b) {
    require_rank(a, 2, "concat_cols");
    require_rank(b, 2, "concat_cols");
    const int n = a.shape()[0], ma = a.shape()[1], mb = b.shape()[1];
    if (b.shape()[0] != n) throw Error(ErrorCode::ShapeMismatch, "concat_cols: row count differs");
    Tensor out({n, ma + mb});
    for (int i = 0; i < n; ++i) {
        std::copy_n(a.value().ptr() + static_cast<std::size_t>(i) * ma, ma, out.ptr() + static_cast<std::size_t>(i) * (ma + mb));
        std::copy_n(b.value().ptr() + static_cast<std::size_t>(i) * mb, mb, out.ptr() + static_cast<std::size_t>(i) * (ma + mb) + ma);
    }
    return make_op(std::move(out), {a, b}, [n, ma, mb](Node& o) {
        const int w = ma + mb;
        if (Node* p = parent(o, 0)) {
            double* g = p->ensure_grad().ptr();
            for (int i = 0; i < n; ++i) kernels::axpy(1.0, o.grad.ptr() + static_cast<std::size_t>(i) * w, g + static_cast<std::size_t>(i) * ma, ma);
        }
        if (Node* p = parent(o, 1)) {
            double* g = p->ensure_grad().ptr();
            for (int i = 0; i < n; ++i) kernels::axpy(1.0, o.grad.ptr() + static_cast<std::size_t>(i) * w + ma, g + static_cast<std::size_t>(i) * mb, mb);
        }
    });
}

Var broadcast_rows(const Var& row, int n) {
    const int m = static_cast<int>(row.value().size());
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) std::copy_n(row.value().ptr(), m, out.ptr() + static_cast<std::size_t>(i) * m);
    return make_op(std::move(out), {row}, [n, m](Node& o) {
        if (Node* p = parent(o, 0)) {
            double* g = p->ensure_grad().ptr();
            for (int i = 0; i < n; ++i) kernels::axpy(1.0, o.grad.ptr() + static_cast<std::size_t>(i) * m, g, m);
        }
    });
}

// ---------------------------------------------------------------------------
// Vectors

Var dot(const Var& a, const Var& b) {
    if (a.value().size() != b.value().size()) {
        throw Error(ErrorCode::ShapeMismatch, "dot: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    const double d = kernels::dot(a.value().ptr(), b.value().ptr(), a.value().size());
    return make_op(Tensor::scalar(d), {a, b}, [](Node& o) {
        Node* pa = o.parents[0].get();
        Node* pb = o.parents[1].get();
        const double g0 = o.grad[0];
        if (Node* p = parent(o, 0)) kernels::axpy(g0, pb->value.ptr(), p->ensure_grad().ptr(), pb->value.size());
        if (Node* p = parent(o, 1)) kernels::axpy(g0, pa->value.ptr(), p->ensure_grad().ptr(), pa->value.size());
    });
}

Var l2_norm(const Var& a) {
    const double n = std::sqrt(kernels::dot(a.value().ptr(), a.value().ptr(), a.value().size()));
    return make_op(Tensor::scalar(n), {a}, [n](Node& o) {
        if (n == 0.0) return;
        if (Node* p = parent(o, 0)) kernels::axpy(o.grad[0] / n, p->value.ptr(), p->ensure_grad().ptr(), p->value.size());
    });
}

Var normalize(const Var& a) {
    const std::size_t len = a.value().size();
    const double n = std::sqrt(kernels::dot(a.value().ptr(), a.value().ptr(), len));
    if (n == 0.0) throw Error(ErrorCode::Numeric, "normalize of zero vector");
    Tensor out = a.value();
    out *= 1.0 / n;
    return make_op(std::move(out), {a}, [n, len](Node& o) {
        if (Node* p = parent(o, 0)) {
            // d(u)/d(a) = (I - u u^T) / n
            const double proj = kernels::dot(o.grad.ptr(), o.value.ptr(), len);
            double* g = p->ensure_grad().ptr();
            for (std::size_t i = 0; i < len; ++i) g[i] += (o.grad[i] - proj * o.value[i]) / n;
        }
    });
}

Var mse(const Var& a, const Tensor& target) {
    if (a.shape() != target.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "mse: " + shape_string(a.shape()) + " vs " + shape_string(target.shape()));
    }
    const std::size_t n = target.size();
    Tensor diff = a.value();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        diff[i] -= target[i];
        s += diff[i] * diff[i];
    }
    return make_op(Tensor::scalar(s / static_cast<double>(n)), {a}, [diff = std::move(diff), n](Node& o) {
        if (Node* p = parent(o, 0)) kernels::axpy(2.0 * o.grad[0] / static_cast<double>(n), diff.ptr(), p->ensure_grad().ptr(), n);
    });
}

Var l1(const Var& a, const Tensor& target) {
    if (a.shape() != target.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "l1: " + shape_string(a.shape()) + " vs " + shape_string(target.shape()));
    }
    const std::size_t n = target.size();
    Tensor sign(a.shape());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.value()[i] - target[i];
        s += std::abs(d);
        sign[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    }
    return make_op(Tensor::scalar(s / static_cast<double>(n)), {a}, [sign = std::move(sign), n](Node& o) {
        if (Node* p = parent(o, 0)) kernels::axpy(o.grad[0] / static_cast<double>(n), sign.ptr(), p->ensure_grad().ptr(), n);
    });
}

Var reject_at_or_below(const Var& s, double tau) {
    if (s.value().size() != 1) throw Error(ErrorCode::ShapeMismatch, "reject_at_or_below expects a scalar");
    const bool keep = s.item() > tau;
    return make_op(Tensor::scalar(keep ? s.item() : 0.0), {s}, [keep](Node& o) {
        if (!keep) return;
        if (Node* p = parent(o, 0)) p->ensure_grad()[0] += o.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Images

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
    require_rank(x, 3, "conv2d");
    require_rank(w, 4, "conv2d");
    const int c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const int oc = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != c || w.shape()[3] != k) {
        throw Error(ErrorCode::ShapeMismatch, "conv2d: input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()));
    }
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (wd + 2 * pad - k) / stride + 1;
    if (oh <= 0 || ow <= 0) throw Error(ErrorCode::Size, "conv2d: input too small " + shape_string(x.shape()));
    const std::size_t ckk = static_cast<std::size_t>(c) * k * k;
    const std::size_t plane = static_cast<std::size_t>(oh) * ow;

    auto cols = std::make_shared<std::vector<double>>(ckk * plane);
    im2col(x.value().ptr(), c, h, wd, k, stride, pad, oh, ow, cols->data());
    Tensor out({oc, oh, ow}, 0.0);
    if (bias.defined()) {
        for (int o = 0; o < oc; ++o) std::fill_n(out.ptr() + o * plane, plane, bias.value()[static_cast<std::size_t>(o)]);
    }
    kernels::gemm(oc, plane, ckk, w.value().ptr(), ckk, cols->data(), plane, out.ptr(), plane);

    std::vector<Var> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents), [=](Node& o) {
        Node* pw = o.parents[1].get();
        if (Node* p = parent(o, 1)) kernels::gemm_nt(oc, ckk, plane, o.grad.ptr(), cols->data(), p->ensure_grad().ptr());
        if (o.parents.size() > 2) {
            if (Node* p = parent(o, 2)) {
                Tensor& g = p->ensure_grad();
                for (int ch = 0; ch < oc; ++ch) {
                    double s = 0.0;
                    const double* src = o.grad.ptr() + ch * plane;
                    for (std::size_t i = 0; i < plane; ++i) s += src[i];
                    g[static_cast<std::size_t>(ch)] += s;
                }
            }
        }
        if (Node* p = parent(o, 0)) {
            std::vector<double> dcols(ckk * plane, 0.0);
            kernels::gemm_tn(ckk, plane, oc, pw->value.ptr(), o.grad.ptr(), dcols.data());
            col2im(dcols.data(), c, h, wd, k, stride, pad, oh, ow, p->ensure_grad().ptr());
        }
    });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, int stride, int pad, int output_pad) {
    require_rank(x, 3, "conv_transpose2d");
    require_rank(w, 4, "conv_transpose2d");
    const int c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const int oc = w.shape()[1], k = w.shape()[2];
    if (w.shape()[0] != c || w.shape()[3] != k) {
        throw Error(ErrorCode::ShapeMismatch, "conv_transpose2d: input " + shape_string(x.shape()) + " weight " + shape_string(w.shape()));
    }
    if (output_pad >= stride) throw Error(ErrorCode::Parameter, "conv_transpose2d: output_pad must be < stride");
    const int oh = (h - 1) * stride - 2 * pad + k + output_pad;
    const int ow = (wd - 1) * stride - 2 * pad + k + output_pad;
    const std::size_t okk = static_cast<std::size_t>(oc) * k * k;
    const std::size_t plane = static_cast<std::size_t>(h) * wd;
    const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;

    std::vector<double> cols(okk * plane, 0.0);
    kernels::gemm_tn(okk, plane, c, w.value().ptr(), x.value().ptr(), cols.data());
    Tensor out({oc, oh, ow}, 0.0);
    col2im(cols.data(), oc, oh, ow, k, stride, pad, h, wd, out.ptr());
    if (bias.defined()) {
        for (int o = 0; o < oc; ++o) {
            double* dst = out.ptr() + o * out_plane;
            for (std::size_t i = 0; i < out_plane; ++i) dst[i] += bias.value()[static_cast<std::size_t>(o)];
        }
    }
    std::vector<Var> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents), [=](Node& o) {
        Node* px = o.parents[0].get();
        Node* pw = o.parents[1].get();
        std::vector<double> dcols(okk * plane);
        im2col(o.grad.ptr(), oc, oh, ow, k, stride, pad, h, wd, dcols.data());
        if (Node* p = parent(o, 0)) kernels::gemm(c, plane, okk, pw->value.ptr(), okk, dcols.data(), plane, p->ensure_grad().ptr(), plane);
        if (Node* p = parent(o, 1)) kernels::gemm_nt(c, okk, plane, px->value.ptr(), dcols.data(), p->ensure_grad().ptr());
        if (o.parents.size() > 2) {
            if (Node* p = parent(o, 2)) {
                Tensor& g = p->ensure_grad();
                for (int ch = 0; ch < oc; ++ch) {
                    double s = 0.0;
                    const double* src = o.grad.ptr() + ch * out_plane;
                    for (std::size_t i = 0; i < out_plane; ++i) s += src[i];
                    g[static_cast<std::size_t>(ch)] += s;
                }
            }
        }
    });
}

Var avg_pool2(const Var& x) {
    require_rank(x, 3, "avg_pool2");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) throw Error(ErrorCode::Size, "avg_pool2: input too small " + shape_string(x.shape()));
    Tensor out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                out.at(ch, y, xx) = 0.25 * (x.value().at(ch, 2 * y, 2 * xx) + x.value().at(ch, 2 * y, 2 * xx + 1) +
                                            x.value().at(ch, 2 * y + 1, 2 * xx) + x.value().at(ch, 2 * y + 1, 2 * xx + 1));
    return make_op(std::move(out), {x}, [c, oh, ow](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx) {
                        const double v = 0.25 * o.grad.at(ch, y, xx);
                        g.at(ch, 2 * y, 2 * xx) += v;
                        g.at(ch, 2 * y, 2 * xx + 1) += v;
                        g.at(ch, 2 * y + 1, 2 * xx) += v;
                        g.at(ch, 2 * y + 1, 2 * xx + 1) += v;
                    }
        }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_rank(a, 3, "concat_channels");
    require_rank(b, 3, "concat_channels");
    if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2]) {
        throw Error(ErrorCode::ShapeMismatch, "concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    const std::size_t na = a.value().size();
    Tensor out({a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]});
    std::copy(a.value().data().begin(), a.value().data().end(), out.ptr());
    std::copy(b.value().data().begin(), b.value().data().end(), out.ptr() + na);
    return make_op(std::move(out), {a, b}, [na](Node& o) {
        if (Node* p = parent(o, 0)) kernels::axpy(1.0, o.grad.ptr(), p->ensure_grad().ptr(), na);
        if (Node* p = parent(o, 1)) kernels::axpy(1.0, o.grad.ptr() + na, p->ensure_grad().ptr(), o.grad.size() - na);
    });
}

SampleMap bilinear_resize_map(int in_h, int in_w, int out_h, int out_w) {
    if (in_h <= 0 || in_w <= 0 || out_h <= 0 || out_w <= 0) throw Error(ErrorCode::Size, "bilinear_resize_map: empty size");
    SampleMap map{in_h, in_w, out_h, out_w, {}, {}};
    const std::size_t n = static_cast<std::size_t>(out_h) * out_w;
    map.index.resize(4 * n);
    map.weight.resize(4 * n);
    const double sy = static_cast<double>(in_h) / out_h;
    const double sx = static_cast<double>(in_w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, in_h - 1);
        const double ty = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, in_w - 1);
            const double tx = fx - x0;
            const std::size_t base = 4 * (static_cast<std::size_t>(y) * out_w + x);
            map.index[base + 0] = y0 * in_w + x0;
            map.index[base + 1] = y0 * in_w + x1;
            map.index[base + 2] = y1 * in_w + x0;
            map.index[base + 3] = y1 * in_w + x1;
            map.weight[base + 0] = (1 - ty) * (1 - tx);
            map.weight[base + 1] = (1 - ty) * tx;
            map.weight[base + 2] = ty * (1 - tx);
            map.weight[base + 3] = ty * tx;
        }
    }
    return map;
}

Var resample(const Var& x, const SampleMap& map) {
    require_rank(x, 3, "resample");
    const int c = x.shape()[0];
    if (x.shape()[1] != map.in_h || x.shape()[2] != map.in_w) {
        throw Error(ErrorCode::ShapeMismatch, "resample: input " + shape_string(x.shape()) + " does not match map " +
                                                  std::to_string(map.in_h) + "x" + std::to_string(map.in_w));
    }
    const std::size_t in_plane = static_cast<std::size_t>(map.in_h) * map.in_w;
    const std::size_t out_plane = static_cast<std::size_t>(map.out_h) * map.out_w;
    Tensor out({c, map.out_h, map.out_w}, 0.0);
    for (int ch = 0; ch < c; ++ch) {
        const double* src = x.value().ptr() + ch * in_plane;
        double* dst = out.ptr() + ch * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) {
            double s = 0.0;
            for (int t = 0; t < 4; ++t) {
                const int idx = map.index[4 * i + t];
                if (idx >= 0) s += map.weight[4 * i + t] * src[idx];
            }
            dst[i] = s;
        }
    }
    auto shared = std::make_shared<SampleMap>(map);
    return make_op(std::move(out), {x}, [shared, c, in_plane, out_plane](Node& o) {
        if (Node* p = parent(o, 0)) {
            Tensor& g = p->ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                double* dst = g.ptr() + ch * in_plane;
                const double* src = o.grad.ptr() + ch * out_plane;
                for (std::size_t i = 0; i < out_plane; ++i) {
                    for (int t = 0; t < 4; ++t) {
                        const int idx = shared->index[4 * i + t];
                        if (idx >= 0) dst[idx] += shared->weight[4 * i + t] * src[i];
                    }
                }
            }
        }
    });
}

Var sparse_blend(const Var& points, const BlendPlan& plan) {
    require_rank(points, 2, "sparse_blend");
    const int n = points.shape()[0], d = points.shape()[1];
    const std::size_t pixels = static_cast<std::size_t>(plan.height) * plan.width;
    if (plan.offset.size() != pixels + 1) throw Error(ErrorCode::ShapeMismatch, "sparse_blend: malformed plan");
    for (int idx : plan.index) {
        if (idx < 0 || idx >= n) throw Error(ErrorCode::ShapeMismatch, "sparse_blend: plan references point " + std::to_string(idx));
    }
    std::vector<double> hwc(pixels * d, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) {
        for (int e = plan.offset[p]; e < plan.offset[p + 1]; ++e) {
            kernels::axpy(plan.weight[static_cast<std::size_t>(e)], points.value().ptr() + static_cast<std::size_t>(plan.index[static_cast<std::size_t>(e)]) * d,
                          hwc.data() + p * d, d);
        }
    }
    Tensor out({d, plan.height, plan.width});
    for (std::size_t p = 0; p < pixels; ++p)
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(c) * pixels + p] = hwc[p * d + c];

    auto shared = std::make_shared<BlendPlan>(plan);
    return make_op(std::move(out), {points}, [shared, d, pixels](Node& o) {
        if (Node* p = parent(o, 0)) {
            std::vector<double> ghwc(pixels * d);
            for (std::size_t px = 0; px < pixels; ++px)
                for (int c = 0; c < d; ++c) ghwc[px * d + c] = o.grad[static_cast<std::size_t>(c) * pixels + px];
            double* g = p->ensure_grad().ptr();
            for (std::size_t px = 0; px < pixels; ++px) {
                for (int e = shared->offset[px]; e < shared->offset[px + 1]; ++e) {
                    kernels::axpy(shared->weight[static_cast<std::size_t>(e)], ghwc.data() + px * d,
                                  g + static_cast<std::size_t>(shared->index[static_cast<std::size_t>(e)]) * d, d);
                }
            }
        }
    });
}

namespace {

// Two-tap tent weights of value v over `bins` bins centred at (b + 0.5) / bins.
struct Tent {
    int lo, hi;
    double wlo, whi;
    double dwhi;  // d(whi)/dv; d(wlo)/dv = -dwhi
};

Tent tent(double v, int bins) {
    const double u = v * bins - 0.5;
    if (u <= 0.0) return {0, 0, 1.0, 0.0, 0.0};
    if (u >= bins - 1) return {bins - 1, bins - 1, 1.0, 0.0, 0.0};
    const int lo = static_cast<int>(std::floor(u));
    const double f = u - lo;
    return {lo, lo + 1, 1.0 - f, f, static_cast<double>(bins)};
}

}  // namespace

Var soft_histogram(const Var& image, int bins) {
    require_rank(image, 3, "soft_histogram");
    if (image.shape()[0] != 3) throw Error(ErrorCode::ShapeMismatch, "soft_histogram needs 3 channels");
    if (bins < 1) throw Error(ErrorCode::Parameter, "soft_histogram: bins must be >= 1");
    const std::size_t plane = static_cast<std::size_t>(image.shape()[1]) * image.shape()[2];
    const double inv = 1.0 / static_cast<double>(plane);
    const double* px = image.value().ptr();
    Tensor hist({bins * bins * bins}, 0.0);
    for (std::size_t i = 0; i < plane; ++i) {
        const Tent r = tent(px[i], bins), g = tent(px[plane + i], bins), b = tent(px[2 * plane + i], bins);
        const int ri[2] = {r.lo, r.hi}, gi[2] = {g.lo, g.hi}, bi[2] = {b.lo, b.hi};
        const double rw[2] = {r.wlo, r.whi}, gw[2] = {g.wlo, g.whi}, bw[2] = {b.wlo, b.whi};
        for (int a = 0; a < 2; ++a)
            for (int c = 0; c < 2; ++c)
                for (int e = 0; e < 2; ++e)
                    hist[static_cast<std::size_t>((ri[a] * bins + gi[c]) * bins + bi[e])] += rw[a] * gw[c] * bw[e] * inv;
    }
    return make_op(std::move(hist), {image}, [bins, plane, inv](Node& o) {
        Node* p = parent(o, 0);
        if (p == nullptr) return;
        const double* px = p->value.ptr();
        double* g = p->ensure_grad().ptr();
        for (std::size_t i = 0; i < plane; ++i) {
            const Tent t[3] = {tent(px[i], bins), tent(px[plane + i], bins), tent(px[2 * plane + i], bins)};
            const int idx[3][2] = {{t[0].lo, t[0].hi}, {t[1].lo, t[1].hi}, {t[2].lo, t[2].hi}};
            const double w[3][2] = {{t[0].wlo, t[0].whi}, {t[1].wlo, t[1].whi}, {t[2].wlo, t[2].whi}};
            const double dw[3][2] = {{-t[0].dwhi, t[0].dwhi}, {-t[1].dwhi, t[1].dwhi}, {-t[2].dwhi, t[2].dwhi}};
            double acc[3] = {0.0, 0.0, 0.0};
            for (int a = 0; a < 2; ++a)
                for (int c = 0; c < 2; ++c)
                    for (int e = 0; e < 2; ++e) {
                        const double go = o.grad[static_cast<std::size_t>((idx[0][a] * bins + idx[1][c]) * bins + idx[2][e])] * inv;
                        acc[0] += go * dw[0][a] * w[1][c] * w[2][e];
                        acc[1] += go * w[0][a] * dw[1][c] * w[2][e];
                        acc[2] += go * w[0][a] * w[1][c] * dw[2][e];
                    }
            g[i] += acc[0];
            g[plane + i] += acc[1];
            g[2 * plane + i] += acc[2];
        }
    });
}

}  // namespace pcstyle::ad
