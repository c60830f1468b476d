#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kdlab/errors.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every operation that produces a gradient-requiring result records its
// operands and a backward rule on the result node; backward() walks that
// record once in reverse topological order. Tensors that do not require
// gradient record nothing, so frozen networks cost no graph memory and can
// never receive gradient. Gradients accumulate across backward calls and are
// only cleared explicitly (Tensor::zero_grad / optimizer), never implicitly.
//
// No broadcasting beyond scalar-tensor and the two bias-add forms; all
// reductions run in a fixed order, so results are deterministic.

namespace kdlab {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
    os << "]";
    return os.str();
}

class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until backward() reaches this node
        bool requires_grad = false;
        std::vector<Tensor> parents;
        std::function<void(Node&)> backward_fn;

        size_t numel() const { return data.size(); }
        void ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        }
    };

    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        for (int d : shape)
            if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), 0.0);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(shape_numel(shape), v);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return node().shape; }
    size_t numel() const { return node().data.size(); }
    const std::vector<double>& data() const { return node().data; }
    std::vector<double>& data() { return node().data; }
    bool requires_grad() const { return node().requires_grad; }
    bool has_grad() const { return defined() && !n_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw ContractError("tensor has no gradient buffer");
        return n_->grad;
    }
    void zero_grad() {
        if (defined()) n_->grad.clear();
    }

    double item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node().data[0];
    }

    // Same forward values, no graph edge: gradient never flows through.
    Tensor detach() const {
        auto n = std::make_shared<Node>();
        n->shape = node().shape;
        n->data = node().data;
        n->requires_grad = false;
        return Tensor(std::move(n));
    }

    // Reverse-mode sweep from a scalar loss. Visits each recorded node exactly
    // once in reverse topological order; gradients accumulate (+=) into every
    // reachable requires_grad tensor.
    void backward() const {
        if (numel() != 1) throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
        if (!requires_grad())
            throw ContractError("backward() on a tensor that does not require gradient");

        std::vector<Node*> topo;
        std::unordered_set<Node*> seen;
        // Iterative post-order DFS; graphs can be deep for long expressions.
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next].n_.get();
                ++next;
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }

        // Interior nodes get a fresh buffer per sweep; leaf gradients persist
        // and accumulate until explicitly zeroed.
        for (Node* n : topo) {
            if (n->backward_fn)
                n->grad.assign(n->data.size(), 0.0);
            else
                n->ensure_grad();
        }
        n_->grad[0] += 1.0;
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
        }
    }

    Node& node() const {
        if (!n_) throw ContractError("use of empty tensor");
        return *n_;
    }

    std::shared_ptr<Node> ptr() const { return n_; }

private:
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;

    friend Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                          std::function<void(Tensor::Node&)> backward_fn);
};

// Shared constructor for op results: records parents + backward rule only
// when some operand requires gradient.
inline Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(Tensor::Node&)> backward_fn) {
    auto n = std::make_shared<Tensor::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}
inline std::vector<double>& grad_of(Tensor::Node& self, size_t i) {
    Tensor::Node& p = self.parents[i].node();
    p.ensure_grad();
    return p.grad;
}
inline bool parent_needs_grad(Tensor::Node& self, size_t i) {
    return self.parents[i].requires_grad();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](Tensor::Node& self) {
        for (size_t k = 0; k < 2; ++k) {
            if (!detail::parent_needs_grad(self, k)) continue;
            auto& g = detail::grad_of(self, k);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](Tensor::Node& self) {
        if (detail::parent_needs_grad(self, 0)) {
            auto& g = detail::grad_of(self, 0);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::parent_needs_grad(self, 1)) {
            auto& g = detail::grad_of(self, 1);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](Tensor::Node& self) {
        const auto& av = self.parents[0].data();
        const auto& bv = self.parents[1].data();
        if (detail::parent_needs_grad(self, 0)) {
            auto& g = detail::grad_of(self, 0);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (detail::parent_needs_grad(self, 1)) {
            auto& g = detail::grad_of(self, 1);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    return make_op(a.shape(), std::move(out), {a}, [](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    return make_op(a.shape(), std::move(out), {a}, [s](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    return make_op(a.shape(), std::move(out), {a}, [](Tensor::Node& self) {
        const auto& av = self.parents[0].data();
        auto& g = detail::grad_of(self, 0);
        for (size_t i = 0; i < g.size(); ++i)
            if (av[i] > 0.0) g[i] += self.grad[i];
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return make_op(a.shape(), std::move(out), {a}, [](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
    });
}

// ---------------------------------------------------------------------------
// bias broadcasts (the only broadcasting forms supported)
// ---------------------------------------------------------------------------

// [r x c] + [c] per row.
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.shape().size() != 2 || v.shape().size() != 1 || m.shape()[1] != v.shape()[0])
        throw DimensionError("add_rowvec: " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
    const int rows = m.shape()[0], cols = m.shape()[1];
    std::vector<double> out(m.numel());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<size_t>(r) * cols + c] = m.data()[static_cast<size_t>(r) * cols + c] + v.data()[c];
    return make_op(m.shape(), std::move(out), {m, v}, [rows, cols](Tensor::Node& self) {
        if (detail::parent_needs_grad(self, 0)) {
            auto& g = detail::grad_of(self, 0);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::parent_needs_grad(self, 1)) {
            auto& g = detail::grad_of(self, 1);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) g[c] += self.grad[static_cast<size_t>(r) * cols + c];
        }
    });
}

// [n x c x h x w] + [c] per channel.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.shape().size() != 4 || b.shape().size() != 1 || x.shape()[1] != b.shape()[0])
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    const int n = x.shape()[0], c = x.shape()[1];
    const size_t hw = static_cast<size_t>(x.shape()[2]) * x.shape()[3];
    std::vector<double> out(x.numel());
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const size_t base = (static_cast<size_t>(i) * c + ch) * hw;
            const double bias = b.data()[ch];
            for (size_t k = 0; k < hw; ++k) out[base + k] = x.data()[base + k] + bias;
        }
    return make_op(x.shape(), std::move(out), {x, b}, [n, c, hw](Tensor::Node& self) {
        if (detail::parent_needs_grad(self, 0)) {
            auto& g = detail::grad_of(self, 0);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::parent_needs_grad(self, 1)) {
            auto& g = detail::grad_of(self, 1);
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) {
                    const size_t base = (static_cast<size_t>(i) * c + ch) * hw;
                    double acc = 0.0;
                    for (size_t k = 0; k < hw; ++k) acc += self.grad[base + k];
                    g[ch] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {
// C[m x n] += A[m x k] * B[k x n], row-major. i-k-j order streams B and C.
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}
// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_bt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
            ci[j] += acc;
        }
    }
}
// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_at_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const double* ak = a + static_cast<size_t>(kk) * m;
        const double* bk = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const double av = ak[i];
            double* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: inner extents do not match, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Tensor::Node& self) {
        const auto& av = self.parents[0].data();
        const auto& bv = self.parents[1].data();
        if (detail::parent_needs_grad(self, 0)) {
            // gA = g . B^T
            detail::gemm_bt_acc(self.grad.data(), bv.data(), detail::grad_of(self, 0).data(), m, n, k);
        }
        if (detail::parent_needs_grad(self, 1)) {
            // gB = A^T . g
            detail::gemm_at_acc(av.data(), self.grad.data(), detail::grad_of(self, 1).data(), k, m, n);
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d / max_pool2d
// ---------------------------------------------------------------------------

namespace detail {
struct ConvDims {
    int n, c, h, w, o, kh, kw, oh, ow, stride, pad;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& kernel, int stride, int pad) {
    if (x.shape().size() != 4 || kernel.shape().size() != 4)
        throw DimensionError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) +
                             " and " + shape_str(kernel.shape()));
    if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
    if (pad < 0) throw ParameterError("conv2d: pad must be >= 0");
    ConvDims d;
    d.n = x.shape()[0];
    d.c = x.shape()[1];
    d.h = x.shape()[2];
    d.w = x.shape()[3];
    d.o = kernel.shape()[0];
    d.kh = kernel.shape()[2];
    d.kw = kernel.shape()[3];
    d.stride = stride;
    d.pad = pad;
    if (kernel.shape()[1] != d.c)
        throw DimensionError("conv2d: kernel channels " + shape_str(kernel.shape()) +
                             " do not match input " + shape_str(x.shape()));
    if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad)
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// col layout: [c*kh*kw] x [n*oh*ow]; column index = (i*oh + oy)*ow + ox.
inline std::vector<double> im2col(const std::vector<double>& x, const ConvDims& d) {
    const size_t cols = static_cast<size_t>(d.n) * d.oh * d.ow;
    std::vector<double> col(static_cast<size_t>(d.c) * d.kh * d.kw * cols, 0.0);
    for (int i = 0; i < d.n; ++i) {
        for (int ch = 0; ch < d.c; ++ch) {
            const double* xp = x.data() + (static_cast<size_t>(i) * d.c + ch) * d.h * d.w;
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    const size_t row = (static_cast<size_t>(ch) * d.kh + ky) * d.kw + kx;
                    double* cp = col.data() + row * cols + static_cast<size_t>(i) * d.oh * d.ow;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int y = oy * d.stride + ky - d.pad;
                        for (int ox = 0; ox < d.ow; ++ox) {
                            const int xx = ox * d.stride + kx - d.pad;
                            cp[static_cast<size_t>(oy) * d.ow + ox] =
                                (y >= 0 && y < d.h && xx >= 0 && xx < d.w)
                                    ? xp[static_cast<size_t>(y) * d.w + xx]
                                    : 0.0;
                        }
                    }
                }
            }
        }
    }
    return col;
}

inline void col2im_acc(const std::vector<double>& col, const ConvDims& d, std::vector<double>& gx) {
    const size_t cols = static_cast<size_t>(d.n) * d.oh * d.ow;
    for (int i = 0; i < d.n; ++i) {
        for (int ch = 0; ch < d.c; ++ch) {
            double* gp = gx.data() + (static_cast<size_t>(i) * d.c + ch) * d.h * d.w;
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    const size_t row = (static_cast<size_t>(ch) * d.kh + ky) * d.kw + kx;
                    const double* cp = col.data() + row * cols + static_cast<size_t>(i) * d.oh * d.ow;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int y = oy * d.stride + ky - d.pad;
                        if (y < 0 || y >= d.h) continue;
                        for (int ox = 0; ox < d.ow; ++ox) {
                            const int xx = ox * d.stride + kx - d.pad;
                            if (xx < 0 || xx >= d.w) continue;
                            gp[static_cast<size_t>(y) * d.w + xx] += cp[static_cast<size_t>(oy) * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
}  // namespace detail

// Cross-correlation with zero padding (im2col + matmul under the hood).
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride = 1, int pad = 0) {
    const auto d = detail::conv_dims(x, kernel, stride, pad);
    const int ckk = d.c * d.kh * d.kw;
    const size_t cols = static_cast<size_t>(d.n) * d.oh * d.ow;

    auto col = std::make_shared<std::vector<double>>(detail::im2col(x.data(), d));
    // out_mat[o x cols] = W[o x ckk] . col
    std::vector<double> out_mat(static_cast<size_t>(d.o) * cols, 0.0);
    detail::gemm_acc(kernel.data().data(), col->data(), out_mat.data(), d.o, ckk, static_cast<int>(cols));

    // reorder [o][n*oh*ow] -> [n][o][oh][ow]
    std::vector<double> out(static_cast<size_t>(d.n) * d.o * d.oh * d.ow);
    const size_t ohw = static_cast<size_t>(d.oh) * d.ow;
    for (int i = 0; i < d.n; ++i)
        for (int oc = 0; oc < d.o; ++oc)
            std::copy_n(out_mat.data() + static_cast<size_t>(oc) * cols + static_cast<size_t>(i) * ohw, ohw,
                        out.data() + (static_cast<size_t>(i) * d.o + oc) * ohw);

    return make_op({d.n, d.o, d.oh, d.ow}, std::move(out), {x, kernel}, [d, col](Tensor::Node& self) {
        const int ckk = d.c * d.kh * d.kw;
        const size_t cols = static_cast<size_t>(d.n) * d.oh * d.ow;
        const size_t ohw = static_cast<size_t>(d.oh) * d.ow;
        // g as [o x cols]
        std::vector<double> g_mat(static_cast<size_t>(d.o) * cols);
        for (int i = 0; i < d.n; ++i)
            for (int oc = 0; oc < d.o; ++oc)
                std::copy_n(self.grad.data() + (static_cast<size_t>(i) * d.o + oc) * ohw, ohw,
                            g_mat.data() + static_cast<size_t>(oc) * cols + static_cast<size_t>(i) * ohw);
        if (detail::parent_needs_grad(self, 1)) {
            // gW = g . col^T
            detail::gemm_bt_acc(g_mat.data(), col->data(), detail::grad_of(self, 1).data(), d.o,
                                static_cast<int>(cols), ckk);
        }
        if (detail::parent_needs_grad(self, 0)) {
            // g_col = W^T . g, then scatter back
            const auto& wv = self.parents[1].data();
            std::vector<double> g_col(static_cast<size_t>(ckk) * cols, 0.0);
            detail::gemm_at_acc(wv.data(), g_mat.data(), g_col.data(), ckk, d.o, static_cast<int>(cols));
            detail::col2im_acc(g_col, d, detail::grad_of(self, 0));
        }
    });
}

inline Tensor max_pool2d(const Tensor& x, int k = 2, int stride = 2) {
    if (x.shape().size() != 4)
        throw DimensionError("max_pool2d: expected 4-d input, got " + shape_str(x.shape()));
    if (k < 1 || stride < 1) throw ParameterError("max_pool2d: window and stride must be >= 1");
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (k > h || k > w)
        throw DimensionError("max_pool2d: window exceeds input " + shape_str(x.shape()));
    const int oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    std::vector<double> out(static_cast<size_t>(n) * c * oh * ow);
    auto argmax = std::make_shared<std::vector<uint32_t>>(out.size());
    size_t oi = 0;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const double* xp = x.data().data() + (static_cast<size_t>(i) * c + ch) * h * w;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    uint32_t bi = 0;
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const size_t idx = static_cast<size_t>(oy * stride + ky) * w + (ox * stride + kx);
                            if (xp[idx] > best) {  // first max wins: lowest index on ties
                                best = xp[idx];
                                bi = static_cast<uint32_t>(idx);
                            }
                        }
                    out[oi] = best;
                    (*argmax)[oi] = bi;
                }
        }
    const size_t chw = static_cast<size_t>(h) * w, ochw = static_cast<size_t>(oh) * ow;
    return make_op({n, c, oh, ow}, std::move(out), {x}, [argmax, n, c, chw, ochw](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const size_t obase = (static_cast<size_t>(i) * c + ch) * ochw;
                const size_t ibase = (static_cast<size_t>(i) * c + ch) * chw;
                for (size_t j = 0; j < ochw; ++j) g[ibase + (*argmax)[obase + j]] += self.grad[obase + j];
            }
    });
}

// ---------------------------------------------------------------------------
// shape ops, reductions
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    std::vector<double> out = x.data();
    return make_op(std::move(new_shape), std::move(out), {x}, [](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// [n x ...] -> [n x rest]
inline Tensor flatten(const Tensor& x) {
    if (x.shape().empty()) throw DimensionError("flatten: empty shape");
    const int n = x.shape()[0];
    const int rest = static_cast<int>(x.numel() / static_cast<size_t>(n));
    return reshape(x, {n, rest});
}

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_op({1}, {acc}, {x}, [](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    });
}

inline Tensor mean_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    return make_op({1}, {acc * inv}, {x}, [inv](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * inv;
    });
}

// Row-wise log-softmax over [b x c], c >= 2. Stable: shifts by the row max.
inline Tensor log_softmax(const Tensor& x) {
    if (x.shape().size() != 2 || x.shape()[1] < 2)
        throw DimensionError("log_softmax: expected [batch x classes>=2], got " + shape_str(x.shape()));
    for (double v : x.data())
        if (std::isnan(v)) throw DataError("log_softmax: NaN in input");
    const int b = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(x.numel());
    for (int r = 0; r < b; ++r) {
        const double* row = x.data().data() + static_cast<size_t>(r) * c;
        double* orow = out.data() + static_cast<size_t>(r) * c;
        double m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
        const double lse = m + std::log(s);
        for (int j = 0; j < c; ++j) orow[j] = row[j] - lse;
    }
    return make_op(x.shape(), std::move(out), {x}, [b, c](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (int r = 0; r < b; ++r) {
            const size_t base = static_cast<size_t>(r) * c;
            double gsum = 0.0;
            for (int j = 0; j < c; ++j) gsum += self.grad[base + j];
            for (int j = 0; j < c; ++j)
                g[base + j] += self.grad[base + j] - std::exp(self.data[base + j]) * gsum;
        }
    });
}

// Mean negative log-probability of the labelled class: nll(log_softmax(x), y)
// is the batch-mean cross-entropy.
inline Tensor nll_loss(const Tensor& logp, const std::vector<int>& labels) {
    if (logp.shape().size() != 2)
        throw DimensionError("nll_loss: expected [batch x classes], got " + shape_str(logp.shape()));
    const int b = logp.shape()[0], c = logp.shape()[1];
    if (static_cast<int>(labels.size()) != b)
        throw DimensionError("nll_loss: batch " + std::to_string(b) + " vs " +
                             std::to_string(labels.size()) + " labels");
    for (int y : labels)
        if (y < 0 || y >= c)
            throw DataError("nll_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    double acc = 0.0;
    for (int r = 0; r < b; ++r) acc -= logp.data()[static_cast<size_t>(r) * c + labels[r]];
    const double inv = 1.0 / b;
    return make_op({1}, {acc * inv}, {logp}, [labels, c, inv](Tensor::Node& self) {
        auto& g = detail::grad_of(self, 0);
        for (size_t r = 0; r < labels.size(); ++r)
            g[r * c + labels[r]] -= self.grad[0] * inv;
    });
}

// Batch-mean KL(p || q) for probability rows, with the 0 log 0 = 0 convention
// and an epsilon floor inside the logs so a zero in q can never produce Inf.
inline constexpr double kKlEpsilon = 1e-12;

inline Tensor kl_div(const Tensor& p, const Tensor& q) {
    detail::check_same_shape(p, q, "kl_div");
    if (p.shape().size() != 2)
        throw DimensionError("kl_div: expected [batch x classes], got " + shape_str(p.shape()));
    const int b = p.shape()[0], c = p.shape()[1];
    for (int r = 0; r < b; ++r) {
        double sp = 0.0, sq = 0.0;
        for (int j = 0; j < c; ++j) {
            sp += p.data()[static_cast<size_t>(r) * c + j];
            sq += q.data()[static_cast<size_t>(r) * c + j];
        }
        if (std::abs(sp - 1.0) > 1e-5 || std::abs(sq - 1.0) > 1e-5)
            throw DataError("kl_div: row " + std::to_string(r) + " is not a probability vector");
    }
    double acc = 0.0;
    for (size_t i = 0; i < p.numel(); ++i) {
        const double pi = p.data()[i];
        if (pi > 0.0)
            acc += pi * (std::log(std::max(pi, kKlEpsilon)) - std::log(std::max(q.data()[i], kKlEpsilon)));
    }
    const double inv = 1.0 / b;
    return make_op({1}, {acc * inv}, {p, q}, [inv](Tensor::Node& self) {
        const auto& pv = self.parents[0].data();
        const auto& qv = self.parents[1].data();
        if (detail::parent_needs_grad(self, 0)) {
            auto& g = detail::grad_of(self, 0);
            for (size_t i = 0; i < g.size(); ++i) {
                if (pv[i] <= 0.0) continue;
                g[i] += self.grad[0] * inv *
                        (std::log(std::max(pv[i], kKlEpsilon)) - std::log(std::max(qv[i], kKlEpsilon)) +
                         (pv[i] > kKlEpsilon ? 1.0 : 0.0));
            }
        }
        if (detail::parent_needs_grad(self, 1)) {
            auto& g = detail::grad_of(self, 1);
            for (size_t i = 0; i < g.size(); ++i) {
                if (pv[i] <= 0.0) continue;
                g[i] -= self.grad[0] * inv * pv[i] / std::max(qv[i], kKlEpsilon);
            }
        }
    });
}

// Anisotropic squared total variation over [n x c x h x w], mean over batch.
inline Tensor total_variation(const Tensor& x) {
    if (x.shape().size() != 4)
        throw DimensionError("total_variation: expected 4-d input, got " + shape_str(x.shape()));
    const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const double* xp = x.data().data() + (static_cast<size_t>(i) * c + ch) * h * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const double v = xp[static_cast<size_t>(y) * w + xx];
                    if (xx + 1 < w) {
                        const double d = xp[static_cast<size_t>(y) * w + xx + 1] - v;
                        acc += d * d;
                    }
                    if (y + 1 < h) {
                        const double d = xp[static_cast<size_t>(y + 1) * w + xx] - v;
                        acc += d * d;
                    }
                }
        }
    const double inv = 1.0 / n;
    return make_op({1}, {acc * inv}, {x}, [n, c, h, w, inv](Tensor::Node& self) {
        const auto& xv = self.parents[0].data();
        auto& g = detail::grad_of(self, 0);
        const double s = 2.0 * self.grad[0] * inv;
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const size_t base = (static_cast<size_t>(i) * c + ch) * h * w;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const size_t idx = base + static_cast<size_t>(y) * w + xx;
                        if (xx + 1 < w) {
                            const double d = xv[idx + 1] - xv[idx];
                            g[idx + 1] += s * d;
                            g[idx] -= s * d;
                        }
                        if (y + 1 < h) {
                            const double d = xv[idx + w] - xv[idx];
                            g[idx + w] += s * d;
                            g[idx] -= s * d;
                        }
                    }
            }
    });
}

}  // namespace kdlab
