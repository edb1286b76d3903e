#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kbforge/errors.hpp"
#include "kbforge/rng.hpp"

namespace kbforge {

// Rank-2, row-major, 64-bit dense tensors with reverse-mode differentiation.
// Scalars are 1x1, row vectors 1xm. Every forward op verifies its output is
// finite and throws NumericFault otherwise.

namespace detail {

struct Node;
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor;

namespace detail {

struct Node {
    std::size_t rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t size() const noexcept { return rows * cols; }
    void ensure_grad() {
        if (grad.size() != size()) {
            grad.assign(size(), 0.0);
        }
    }
};

inline void check_finite(const Node& n, const char* op) {
    for (double v : n.value) {
        if (!std::isfinite(v)) {
            throw NumericFault(std::string("non-finite value produced by ") + op);
        }
    }
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
        return make(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
    }

    static Tensor full(std::size_t rows, std::size_t cols, double v) {
        return make(rows, cols, std::vector<double>(rows * cols, v), false);
    }

    static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
        if (data.size() != rows * cols) {
            throw UsageError("tensor: data size does not match shape");
        }
        return make(rows, cols, std::move(data), requires_grad);
    }

    static Tensor scalar(double v) { return make(1, 1, {v}, false); }

    static Tensor randn(std::size_t rows, std::size_t cols, SplitMix64& rng, double stddev,
                        bool requires_grad = true) {
        std::vector<double> data(rows * cols);
        for (double& v : data) {
            v = rng.gaussian() * stddev;
        }
        return make(rows, cols, std::move(data), requires_grad);
    }

    bool defined() const noexcept { return node_ != nullptr; }
    std::size_t rows() const noexcept { return node_ ? node_->rows : 0; }
    std::size_t cols() const noexcept { return node_ ? node_->cols : 0; }
    std::size_t size() const noexcept { return node_ ? node_->size() : 0; }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

    double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
    double item() const {
        if (size() != 1) {
            throw UsageError("tensor: item() requires a 1x1 tensor");
        }
        return node_->value[0];
    }

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (node_) {
            node_->grad.assign(node_->size(), 0.0);
        }
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    static Tensor make(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad) {
        auto n = std::make_shared<detail::Node>();
        n->rows = rows;
        n->cols = cols;
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        detail::check_finite(*n, "tensor literal");
        return wrap(n);
    }

    std::shared_ptr<detail::Node> node_;
};

struct Parameter {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline std::shared_ptr<Node> new_op(std::size_t rows, std::size_t cols,
                                    std::vector<double> value,
                                    std::vector<Tensor> parents, const char* op) {
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(value);
    check_finite(*n, op);
    bool track = grad_mode();
    bool any = false;
    for (const Tensor& p : parents) {
        any = any || p.requires_grad();
    }
    if (track && any) {
        n->requires_grad = true;
        for (const Tensor& p : parents) {
            n->parents.push_back(p.node());
        }
    }
    return n;
}

inline void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) {
        throw UsageError(std::string(op) + ": undefined tensor");
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_defined(a, "matmul");
    detail::require_defined(b, "matmul");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k) {
        throw UsageError("matmul: inner dimensions differ");
    }
    std::vector<double> out(n * m, 0.0);
    const auto& A = a.values();
    const auto& B = b.values();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double av = A[i * k + l];
            if (av == 0.0) {
                continue;
            }
            const double* brow = B.data() + l * m;
            double* crow = out.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    auto node = detail::new_op(n, m, std::move(out), {a, b}, "matmul");
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->backward_fn = [an, bn, n, k, m](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = self.grad[i * m + j];
                        if (g == 0.0) {
                            continue;
                        }
                        for (std::size_t l = 0; l < k; ++l) {
                            an->grad[i * k + l] += g * bn->value[l * m + j];
                        }
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t l = 0; l < k; ++l) {
                        const double av = an->value[i * k + l];
                        if (av == 0.0) {
                            continue;
                        }
                        for (std::size_t j = 0; j < m; ++j) {
                            bn->grad[l * m + j] += av * self.grad[i * m + j];
                        }
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor transpose(const Tensor& a) {
    detail::require_defined(a, "transpose");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[j * n + i] = a.values()[i * m + j];
        }
    }
    auto node = detail::new_op(m, n, std::move(out), {a}, "transpose");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an, n, m](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    an->grad[i * m + j] += self.grad[j * n + i];
                }
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_defined(a, "add");
    detail::require_defined(b, "add");
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw UsageError("add: shape mismatch");
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.values()[i] + b.values()[i];
    }
    auto node = detail::new_op(a.rows(), a.cols(), std::move(out), {a, b}, "add");
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->backward_fn = [an, bn](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    an->grad[i] += self.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    bn->grad[i] += self.grad[i];
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// Broadcast a 1xm row vector over every row.
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    detail::require_defined(a, "add_rowvec");
    detail::require_defined(b, "add_rowvec");
    if (b.rows() != 1 || b.cols() != a.cols()) {
        throw UsageError("add_rowvec: expected 1x" + std::to_string(a.cols()) + " vector");
    }
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] = a.values()[i * m + j] + b.values()[j];
        }
    }
    auto node = detail::new_op(n, m, std::move(out), {a, b}, "add_rowvec");
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->backward_fn = [an, bn, n, m](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n * m; ++i) {
                    an->grad[i] += self.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < m; ++j) {
                        bn->grad[j] += self.grad[i * m + j];
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// Broadcast an nx1 column vector over every column.
inline Tensor add_colvec(const Tensor& a, const Tensor& b) {
    detail::require_defined(a, "add_colvec");
    detail::require_defined(b, "add_colvec");
    if (b.cols() != 1 || b.rows() != a.rows()) {
        throw UsageError("add_colvec: expected " + std::to_string(a.rows()) + "x1 vector");
    }
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] = a.values()[i * m + j] + b.values()[i];
        }
    }
    auto node = detail::new_op(n, m, std::move(out), {a, b}, "add_colvec");
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->backward_fn = [an, bn, n, m](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n * m; ++i) {
                    an->grad[i] += self.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < m; ++j) {
                        bn->grad[i] += self.grad[i * m + j];
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor scale(const Tensor& a, double s) {
    detail::require_defined(a, "scale");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.values()[i] * s;
    }
    auto node = detail::new_op(a.rows(), a.cols(), std::move(out), {a}, "scale");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an, s](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += s * self.grad[i];
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_defined(a, "mul");
    detail::require_defined(b, "mul");
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw UsageError("mul: shape mismatch");
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.values()[i] * b.values()[i];
    }
    auto node = detail::new_op(a.rows(), a.cols(), std::move(out), {a, b}, "mul");
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->backward_fn = [an, bn](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    an->grad[i] += bn->value[i] * self.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    bn->grad[i] += an->value[i] * self.grad[i];
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// Embedding lookup: out[i,:] = table[ids[i],:].
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    detail::require_defined(table, "gather_rows");
    const std::size_t V = table.rows(), d = table.cols(), L = ids.size();
    std::vector<double> out(L * d);
    for (std::size_t i = 0; i < L; ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
            throw DataError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
        }
        std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.data() + i * d);
    }
    auto node = detail::new_op(L, d, std::move(out), {table}, "gather_rows");
    if (node->requires_grad) {
        auto tn = table.node();
        node->backward_fn = [tn, ids, d](detail::Node& self) {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* dst = tn->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                const double* src = self.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += src[j];
                }
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor softmax_rows(const Tensor& a) {
    detail::require_defined(a, "softmax_rows");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = a.values().data() + i * m;
        double mx = row[0];
        for (std::size_t j = 1; j < m; ++j) {
            mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] = std::exp(row[j] - mx);
            sum += out[i * m + j];
        }
        for (std::size_t j = 0; j < m; ++j) {
            out[i * m + j] /= sum;
        }
    }
    auto node = detail::new_op(n, m, std::move(out), {a}, "softmax_rows");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an, n, m](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* y = self.value.data() + i * m;
                const double* dy = self.grad.data() + i * m;
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) {
                    dot += dy[j] * y[j];
                }
                for (std::size_t j = 0; j < m; ++j) {
                    an->grad[i * m + j] += y[j] * (dy[j] - dot);
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// Per-row (x - mean)/sqrt(population variance + eps) * gain + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    detail::require_defined(x, "layer_norm");
    const std::size_t n = x.rows(), d = x.cols();
    if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
        throw UsageError("layer_norm: gain/bias must be 1x" + std::to_string(d));
    }
    std::vector<double> out(n * d);
    auto xhat = std::make_shared<std::vector<double>>(n * d);
    auto inv = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.values().data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += row[j];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += (row[j] - mean) * (row[j] - mean);
        }
        var /= static_cast<double>(d);
        const double iv = 1.0 / std::sqrt(var + eps);
        (*inv)[i] = iv;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mean) * iv;
            (*xhat)[i * d + j] = h;
            out[i * d + j] = h * gain.values()[j] + bias.values()[j];
        }
    }
    auto node = detail::new_op(n, d, std::move(out), {x, gain, bias}, "layer_norm");
    if (node->requires_grad) {
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        node->backward_fn = [xn, gn, bn, xhat, inv, n, d](detail::Node& self) {
            if (gn->requires_grad) {
                gn->ensure_grad();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
            }
            for (std::size_t i = 0; i < n; ++i) {
                const double* dy = self.grad.data() + i * d;
                const double* h = xhat->data() + i * d;
                if (gn->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gn->grad[j] += dy[j] * h[j];
                    }
                }
                if (bn->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) {
                        bn->grad[j] += dy[j];
                    }
                }
                if (xn->requires_grad) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[j] * gn->value[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= static_cast<double>(d);
                    mean_dh_h /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[j] * gn->value[j];
                        xn->grad[i * d + j] += (*inv)[i] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
inline Tensor gelu(const Tensor& x) {
    detail::require_defined(x, "gelu");
    static const double kAlpha = std::sqrt(2.0 / 3.14159265358979323846);
    static constexpr double kCubic = 0.044715;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.values()[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kAlpha * (v + kCubic * v * v * v)));
    }
    auto node = detail::new_op(x.rows(), x.cols(), std::move(out), {x}, "gelu");
    if (node->requires_grad) {
        auto xn = x.node();
        node->backward_fn = [xn](detail::Node& self) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double v = xn->value[i];
                const double t = std::tanh(kAlpha * (v + kCubic * v * v * v));
                const double du = kAlpha * (1.0 + 3.0 * kCubic * v * v);
                const double dydx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                xn->grad[i] += dydx * self.grad[i];
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::require_defined(a, "concat_cols");
    detail::require_defined(b, "concat_cols");
    if (a.rows() != b.rows()) {
        throw UsageError("concat_cols: row counts differ");
    }
    const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
    std::vector<double> out(n * (ca + cb));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.values().data() + i * ca, ca, out.data() + i * (ca + cb));
        std::copy_n(b.values().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
    }
    auto node = detail::new_op(n, ca + cb, std::move(out), {a, b}, "concat_cols");
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->backward_fn = [an, bn, n, ca, cb](detail::Node& self) {
            for (std::size_t i = 0; i < n; ++i) {
                const double* g = self.grad.data() + i * (ca + cb);
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (std::size_t j = 0; j < ca; ++j) {
                        an->grad[i * ca + j] += g[j];
                    }
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < cb; ++j) {
                        bn->grad[i * cb + j] += g[ca + j];
                    }
                }
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b, const Tensor& c) {
    return concat_cols(concat_cols(a, b), c);
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::require_defined(a, "concat_rows");
    detail::require_defined(b, "concat_rows");
    if (a.cols() != b.cols()) {
        throw UsageError("concat_rows: column counts differ");
    }
    const std::size_t m = a.cols(), ra = a.rows(), rb = b.rows();
    std::vector<double> out;
    out.reserve((ra + rb) * m);
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    auto node = detail::new_op(ra + rb, m, std::move(out), {a, b}, "concat_rows");
    if (node->requires_grad) {
        auto an = a.node();
        auto bn = b.node();
        node->backward_fn = [an, bn, ra, rb, m](detail::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < ra * m; ++i) {
                    an->grad[i] += self.grad[i];
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < rb * m; ++i) {
                    bn->grad[i] += self.grad[ra * m + i];
                }
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    detail::require_defined(a, "slice_rows");
    if (r0 >= r1 || r1 > a.rows()) {
        throw UsageError("slice_rows: bad range");
    }
    const std::size_t m = a.cols();
    std::vector<double> out(a.values().begin() + r0 * m, a.values().begin() + r1 * m);
    auto node = detail::new_op(r1 - r0, m, std::move(out), {a}, "slice_rows");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an, r0, m](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[r0 * m + i] += self.grad[i];
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    detail::require_defined(a, "slice_cols");
    if (c0 >= c1 || c1 > a.cols()) {
        throw UsageError("slice_cols: bad range");
    }
    const std::size_t n = a.rows(), m = a.cols(), w = c1 - c0;
    std::vector<double> out(n * w);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.values().data() + i * m + c0, w, out.data() + i * w);
    }
    auto node = detail::new_op(n, w, std::move(out), {a}, "slice_cols");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an, c0, n, m, w](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    an->grad[i * m + c0 + j] += self.grad[i * w + j];
                }
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor row(const Tensor& a, std::size_t i) { return slice_rows(a, i, i + 1); }

inline Tensor sum_all(const Tensor& a) {
    detail::require_defined(a, "sum_all");
    double s = 0.0;
    for (double v : a.values()) {
        s += v;
    }
    auto node = detail::new_op(1, 1, {s}, {a}, "sum_all");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an](detail::Node& self) {
            an->ensure_grad();
            for (double& g : an->grad) {
                g += self.grad[0];
            }
        };
    }
    return Tensor::wrap(node);
}

inline Tensor mean_all(const Tensor& a) {
    detail::require_defined(a, "mean_all");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor pick(const Tensor& a, std::size_t r, std::size_t c) {
    detail::require_defined(a, "pick");
    if (r >= a.rows() || c >= a.cols()) {
        throw UsageError("pick: index out of range");
    }
    const std::size_t flat = r * a.cols() + c;
    auto node = detail::new_op(1, 1, {a.values()[flat]}, {a}, "pick");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an, flat](detail::Node& self) {
            an->ensure_grad();
            an->grad[flat] += self.grad[0];
        };
    }
    return Tensor::wrap(node);
}

// Column-wise log-sum-exp: out[0,j] = log sum_i exp(a[i,j]), with max-shift.
inline Tensor logsumexp_cols(const Tensor& a) {
    detail::require_defined(a, "logsumexp_cols");
    const std::size_t n = a.rows(), m = a.cols();
    std::vector<double> out(m);
    for (std::size_t j = 0; j < m; ++j) {
        double mx = a.values()[j];
        for (std::size_t i = 1; i < n; ++i) {
            mx = std::max(mx, a.values()[i * m + j]);
        }
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            s += std::exp(a.values()[i * m + j] - mx);
        }
        out[j] = mx + std::log(s);
    }
    auto node = detail::new_op(1, m, std::move(out), {a}, "logsumexp_cols");
    if (node->requires_grad) {
        auto an = a.node();
        node->backward_fn = [an, n, m](detail::Node& self) {
            an->ensure_grad();
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    const double w = std::exp(an->value[i * m + j] - self.value[j]);
                    an->grad[i * m + j] += w * self.grad[j];
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// Mean negative log-likelihood over rows, log-sum-exp with max subtraction.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    detail::require_defined(logits, "softmax_cross_entropy");
    const std::size_t n = logits.rows(), V = logits.cols();
    if (targets.size() != n) {
        throw UsageError("softmax_cross_entropy: one target per row required");
    }
    auto probs = std::make_shared<std::vector<double>>(n * V);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
            throw DataError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                            " out of range");
        }
        const double* row = logits.values().data() + i * V;
        double mx = row[0];
        for (std::size_t j = 1; j < V; ++j) {
            mx = std::max(mx, row[j]);
        }
        double s = 0.0;
        for (std::size_t j = 0; j < V; ++j) {
            s += std::exp(row[j] - mx);
        }
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < V; ++j) {
            (*probs)[i * V + j] = std::exp(row[j] - lse);
        }
        total += lse - row[targets[i]];
    }
    total /= static_cast<double>(n);
    auto node = detail::new_op(1, 1, {total}, {logits}, "softmax_cross_entropy");
    if (node->requires_grad) {
        auto ln = logits.node();
        node->backward_fn = [ln, probs, targets, n, V](detail::Node& self) {
            ln->ensure_grad();
            const double g = self.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < V; ++j) {
                    double p = (*probs)[i * V + j];
                    if (j == static_cast<std::size_t>(targets[i])) {
                        p -= 1.0;
                    }
                    ln->grad[i * V + j] += g * p;
                }
            }
        };
    }
    return Tensor::wrap(node);
}

// Mean binary cross-entropy of nx1 logits against labels, in stable form
// max(z,0) - z*y + log(1 + exp(-|z|)).
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& labels) {
    detail::require_defined(logits, "bce_with_logits");
    const std::size_t n = logits.rows();
    if (logits.cols() != 1 || labels.size() != n) {
        throw UsageError("bce_with_logits: logits must be nx1 with one label per row");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits.values()[i];
        const double y = labels[i];
        total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    total /= static_cast<double>(n);
    auto node = detail::new_op(1, 1, {total}, {logits}, "bce_with_logits");
    if (node->requires_grad) {
        auto ln = logits.node();
        node->backward_fn = [ln, labels, n](detail::Node& self) {
            ln->ensure_grad();
            const double g = self.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double z = ln->value[i];
                const double sig =
                    z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
                ln->grad[i] += g * (sig - labels[i]);
            }
        };
    }
    return Tensor::wrap(node);
}

inline void backward(const Tensor& root) {
    if (root.size() != 1) {
        throw UsageError("backward: root must be a scalar");
    }
    if (!root.requires_grad()) {
        return;
    }
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            detail::Node* p = node->parents[next_child].get();
            ++next_child;
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is post-order: parents before children; walk it backward.
    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

struct GradCheckOptions {
    double h = 1e-5;
    std::size_t coords_per_param = 64;
    std::uint64_t seed = 1;
    // Multiplier on the analytic gradient before comparison; 1.0 for real
    // checks, != 1.0 to verify the checker itself notices corruption.
    double analytic_scale = 1.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_coord = 0;
};

// Central-difference check of reverse-mode gradients on a random subset of
// coordinates; relative error against max(|numeric|, |analytic|, 1e-8).
template <class F>
GradCheckReport grad_check(F&& f, const std::vector<Parameter*>& params,
                           GradCheckOptions opt = {}) {
    for (Parameter* p : params) {
        p->tensor.zero_grad();
    }
    Tensor loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) {
        std::vector<double> g = p->tensor.grad();
        for (double& v : g) {
            v *= opt.analytic_scale;
        }
        analytic.push_back(std::move(g));
    }

    auto eval = [&]() {
        NoGradGuard ng;
        Tensor t = f();
        return t.item();
    };

    SplitMix64 rng(opt.seed);
    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        const std::size_t n = p->tensor.size();
        std::vector<std::size_t> coords;
        if (n <= opt.coords_per_param) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                coords[i] = i;
            }
        } else {
            std::unordered_set<std::size_t> chosen;
            while (chosen.size() < opt.coords_per_param) {
                chosen.insert(static_cast<std::size_t>(rng.below(n)));
            }
            coords.assign(chosen.begin(), chosen.end());
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t c : coords) {
            double& slot = p->tensor.values()[c];
            const double orig = slot;
            slot = orig + opt.h;
            const double fp = eval();
            slot = orig - opt.h;
            const double fm = eval();
            slot = orig;
            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double a = analytic[pi][c];
            const double denom = std::max({std::abs(numeric), std::abs(a), 1e-8});
            const double rel = std::abs(numeric - a) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p->name;
                report.worst_coord = c;
            }
        }
    }
    return report;
}

}  // namespace kbforge
