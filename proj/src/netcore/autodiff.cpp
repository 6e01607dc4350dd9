#include "dollar/netcore/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dollar/error.hpp"

namespace dollar {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;
thread_local bool g_params_frozen = false;
thread_local DetachReplay* g_replay = nullptr;

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Tensor value) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    return n;
}

/// Wraps an op result; records the graph only when some input needs it.
Var record(Tensor value, std::vector<NodePtr> inputs, std::function<void(detail::Node&)> fn) {
    auto n = make_node(std::move(value));
    if (g_grad_enabled) {
        bool any = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& p) { return p->requires_grad; });
        if (any) {
            n->requires_grad = true;
            n->inputs = std::move(inputs);
            n->backward_fn = std::move(fn);
        }
    }
    return Var::from_node(std::move(n));
}

const NodePtr& N(const Var& v) {
    require(v.defined(), "autodiff: use of undefined Var");
    return v.node();
}

void check_same(const Var& a, const Var& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
}

}  // namespace

Tensor& detail::Node::ensure_grad() {
    if (grad.empty()) {
        grad = Tensor(value.shape());
    }
    return grad;
}

Var Var::constant(Tensor value) { return from_node(make_node(std::move(value))); }

Var Var::parameter(Tensor value) {
    auto n = make_node(std::move(value));
    n->requires_grad = true;
    return from_node(std::move(n));
}

const Tensor& Var::value() const {
    require(defined(), "Var::value on undefined Var");
    return node_->value;
}

Tensor& Var::mutable_value() {
    require(defined() && !node_->backward_fn, "Var::mutable_value only valid on leaves");
    return node_->value;
}

Tensor Var::grad() const {
    require(defined(), "Var::grad on undefined Var");
    return node_->grad.empty() ? Tensor(node_->value.shape()) : node_->grad;
}

void Var::zero_grad() {
    if (node_ && !node_->grad.empty()) {
        node_->grad.fill(0.0);
    }
}

Var Var::detach() const { return constant(DetachReplay::intercept(value())); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

FreezeParamsGuard::FreezeParamsGuard() : previous_(g_params_frozen) { g_params_frozen = true; }
FreezeParamsGuard::~FreezeParamsGuard() { g_params_frozen = previous_; }
bool params_frozen() { return g_params_frozen; }

DetachReplay::DetachReplay(Mode mode, std::vector<Tensor>* store) : previous_(g_replay), mode_(mode), store_(store) {
    if (mode_ == Mode::record) {
        store_->clear();
    }
    g_replay = this;
}

DetachReplay::~DetachReplay() { g_replay = previous_; }

Tensor DetachReplay::intercept(const Tensor& value) {
    DetachReplay* r = g_replay;
    if (r == nullptr) {
        return value;
    }
    if (r->mode_ == Mode::record) {
        r->store_->push_back(value);
        return value;
    }
    require(r->cursor_ < r->store_->size(), "DetachReplay: more detach() calls than recorded");
    const Tensor& t = (*r->store_)[r->cursor_++];
    require(t.shape() == value.shape(), "DetachReplay: replayed shape mismatch");
    return t;
}

void backward(const Var& loss) {
    require(loss.defined() && loss.value().size() == 1,
            "backward: loss must be a scalar, got shape " + (loss.defined() ? shape_str(loss.shape()) : "undef"));
    if (!loss.requires_grad()) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
    // Interior grads are scratch space; release them so repeated backward
    // passes through shared subgraphs do not double count.
    for (detail::Node* n : order) {
        if (n->backward_fn) {
            n->grad = Tensor();
        }
    }
}

namespace ops {

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b.value()[i];
    }
    auto na = N(a), nb = N(b);
    return record(std::move(out), {na, nb}, [na, nb](detail::Node& self) {
        for (auto* p : {na.get(), nb.get()}) {
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b.value()[i];
    }
    auto na = N(a), nb = N(b);
    return record(std::move(out), {na, nb}, [na, nb](detail::Node& self) {
        if (na->requires_grad) {
            auto& g = na->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (nb->requires_grad) {
            auto& g = nb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] -= self.grad[i];
            }
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    auto na = N(a), nb = N(b);
    return record(std::move(out), {na, nb}, [na, nb](detail::Node& self) {
        if (na->requires_grad) {
            auto& g = na->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * nb->value[i];
            }
        }
        if (nb->requires_grad) {
            auto& g = nb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * na->value[i];
            }
        }
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        v *= s;
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na, s](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += s * self.grad[i];
        }
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        v += s;
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

Var scale_rows(const Var& a, const std::vector<double>& coef) {
    require(coef.size() == a.rows(), "scale_rows: coefficient count != rows");
    const std::size_t c = a.cols();
    Tensor out = a.value();
    for (std::size_t r = 0; r < coef.size(); ++r) {
        for (std::size_t j = 0; j < c; ++j) {
            out[r * c + j] *= coef[r];
        }
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na, coef, c](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t r = 0; r < coef.size(); ++r) {
            for (std::size_t j = 0; j < c; ++j) {
                g[r * c + j] += coef[r] * self.grad[r * c + j];
            }
        }
    });
}

Var mul_const(const Var& a, const Tensor& c) {
    require(a.value().size() == c.size(), "mul_const: size mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= c[i];
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na, c](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += c[i] * self.grad[i];
        }
    });
}

Var add_const(const Var& a, const Tensor& c) {
    require(a.value().size() == c.size(), "add_const: size mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += c[i];
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

Var matmul(const Var& x, const Var& w) {
    require(x.value().rank() == 2 && w.value().rank() == 2 && x.cols() == w.rows(),
            "matmul: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const std::size_t B = x.rows(), I = x.cols(), O = w.cols();
    Tensor out({B, O});
    MapMat(out.data(), B, O).noalias() = CMapMat(x.value().data(), B, I) * CMapMat(w.value().data(), I, O);
    auto nx = N(x), nw = N(w);
    return record(std::move(out), {nx, nw}, [nx, nw, B, I, O](detail::Node& self) {
        CMapMat gy(self.grad.data(), B, O);
        if (nx->requires_grad) {
            MapMat(nx->ensure_grad().data(), B, I).noalias() += gy * CMapMat(nw->value.data(), I, O).transpose();
        }
        if (nw->requires_grad) {
            MapMat(nw->ensure_grad().data(), I, O).noalias() += CMapMat(nx->value.data(), B, I).transpose() * gy;
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    require(x.value().rank() == 2 && w.value().rank() == 2 && x.cols() == w.rows() && b.value().size() == w.cols(),
            "linear: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const std::size_t B = x.rows(), I = x.cols(), O = w.cols();
    Tensor out({B, O});
    MapMat y(out.data(), B, O);
    y.noalias() = CMapMat(x.value().data(), B, I) * CMapMat(w.value().data(), I, O);
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), static_cast<Eigen::Index>(O));
    auto nx = N(x), nw = N(w), nb = N(b);
    return record(std::move(out), {nx, nw, nb}, [nx, nw, nb, B, I, O](detail::Node& self) {
        CMapMat gy(self.grad.data(), B, O);
        if (nx->requires_grad) {
            MapMat(nx->ensure_grad().data(), B, I).noalias() += gy * CMapMat(nw->value.data(), I, O).transpose();
        }
        if (nw->requires_grad) {
            MapMat(nw->ensure_grad().data(), I, O).noalias() += CMapMat(nx->value.data(), B, I).transpose() * gy;
        }
        if (nb->requires_grad) {
            Eigen::Map<Eigen::RowVectorXd>(nb->ensure_grad().data(), static_cast<Eigen::Index>(O)) +=
                gy.colwise().sum();
        }
    });
}

Var silu(const Var& a) {
    const auto& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] / (1.0 + std::exp(-x[i]));
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na](detail::Node& self) {
        auto& g = na->ensure_grad();
        const auto& x = na->value;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            g[i] += self.grad[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
}

Var sigmoid(const Var& a) {
    const auto& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = 1.0 / (1.0 + std::exp(-x[i]));
    }
    auto na = N(a);
    Tensor y = out;
    return record(std::move(out), {na}, [na, y](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
        }
    });
}

Var square(const Var& a) {
    const auto& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * x[i];
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += 2.0 * na->value[i] * self.grad[i];
        }
    });
}

Var huber(const Var& a, double delta) {
    const auto& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = std::abs(x[i]);
        out[i] = r <= delta ? 0.5 * x[i] * x[i] : delta * (r - 0.5 * delta);
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na, delta](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = na->value[i];
            const double d = std::abs(v) <= delta ? v : (v > 0 ? delta : -delta);
            g[i] += d * self.grad[i];
        }
    });
}

Var sqrt_eps(const Var& a, double eps) {
    const auto& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::sqrt(x[i] + eps);
    }
    auto na = N(a);
    Tensor y = out;
    return record(std::move(out), {na}, [na, y](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * 0.5 / y[i];
        }
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) {
        s += v;
    }
    auto na = N(a);
    return record(Tensor::scalar(s), {na}, [na](detail::Node& self) {
        auto& g = na->ensure_grad();
        const double gs = self.grad[0];
        for (auto& v : g.values()) {
            v += gs;
        }
    });
}

Var mean(const Var& a) {
    require(a.value().size() > 0, "mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(const Var& a) {
    const std::size_t B = a.rows(), C = a.cols();
    Tensor out({B, 1});
    for (std::size_t r = 0; r < B; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
            s += a.value()[r * C + j];
        }
        out[r] = s;
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na, B, C](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t r = 0; r < B; ++r) {
            for (std::size_t j = 0; j < C; ++j) {
                g[r * C + j] += self.grad[r];
            }
        }
    });
}

Var row_mean(const Var& a) { return scale(row_sum(a), 1.0 / static_cast<double>(a.cols())); }

Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    const std::size_t B = parts.front().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    std::vector<NodePtr> inputs;
    for (const auto& p : parts) {
        require(p.rows() == B, "concat_cols: row mismatch");
        widths.push_back(p.cols());
        total += p.cols();
        inputs.push_back(N(p));
    }
    Tensor out({B, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& v = parts[k].value();
        for (std::size_t r = 0; r < B; ++r) {
            std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + off);
        }
        off += widths[k];
    }
    return record(std::move(out), inputs, [inputs, widths, B, total](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            if (inputs[k]->requires_grad) {
                auto& g = inputs[k]->ensure_grad();
                for (std::size_t r = 0; r < B; ++r) {
                    for (std::size_t j = 0; j < widths[k]; ++j) {
                        g[r * widths[k] + j] += self.grad[r * total + off + j];
                    }
                }
            }
            off += widths[k];
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    std::vector<Tensor> values;
    std::vector<NodePtr> inputs;
    for (const auto& p : parts) {
        values.push_back(p.value());
        inputs.push_back(N(p));
    }
    Tensor out = dollar::concat_rows(values);
    return record(std::move(out), inputs, [inputs](detail::Node& self) {
        std::size_t off = 0;
        for (const auto& in : inputs) {
            const std::size_t n = in->value.size();
            if (in->requires_grad) {
                auto& g = in->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    g[i] += self.grad[off + i];
                }
            }
            off += n;
        }
    });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
    Tensor out = a.value().rows_slice(begin, end);
    const std::size_t off = begin * a.cols();
    auto na = N(a);
    return record(std::move(out), {na}, [na, off](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[off + i] += self.grad[i];
        }
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    auto na = N(a);
    return record(std::move(out), {na}, [na](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

Var swap_last(const Var& a) {
    const auto& s = a.shape();
    require(s.size() >= 3, "swap_last: need [B, A, C...]");
    const std::size_t B = s[0], A = s[1], C = a.value().size() / (B * A);
    Tensor out({B, C, A});
    const auto& v = a.value();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < A; ++i) {
            for (std::size_t j = 0; j < C; ++j) {
                out[(b * C + j) * A + i] = v[(b * A + i) * C + j];
            }
        }
    }
    auto na = N(a);
    return record(std::move(out), {na}, [na, B, A, C](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < A; ++i) {
                for (std::size_t j = 0; j < C; ++j) {
                    g[(b * A + i) * C + j] += self.grad[(b * C + j) * A + i];
                }
            }
        }
    });
}

Var embedding(const Var& table, const std::vector<int>& index) {
    require(table.value().rank() == 2, "embedding: table must be rank 2");
    const std::size_t K = table.rows(), E = table.cols(), B = index.size();
    Tensor out({B, E});
    for (std::size_t r = 0; r < B; ++r) {
        require(index[r] >= 0 && static_cast<std::size_t>(index[r]) < K, "embedding: index out of range");
        std::copy_n(table.value().data() + static_cast<std::size_t>(index[r]) * E, E, out.data() + r * E);
    }
    auto nt = N(table);
    return record(std::move(out), {nt}, [nt, index, E](detail::Node& self) {
        auto& g = nt->ensure_grad();
        for (std::size_t r = 0; r < index.size(); ++r) {
            for (std::size_t j = 0; j < E; ++j) {
                g[static_cast<std::size_t>(index[r]) * E + j] += self.grad[r * E + j];
            }
        }
    });
}

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1] && ws[2] == ws[3] && b.value().size() == ws[0],
            "conv2d: incompatible shapes " + shape_str(xs) + " * " + shape_str(ws));
    const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t O = ws[0], K = ws[2];
    require(H + 2 * pad >= K && W + 2 * pad >= K && stride > 0, "conv2d: kernel larger than padded input");
    const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
    const std::size_t CKK = C * K * K, P = Ho * Wo, BP = B * P;

    // cols[CKK, B*P]
    auto cols = std::make_shared<RowMat>(RowMat::Zero(static_cast<Eigen::Index>(CKK), static_cast<Eigen::Index>(BP)));
    const double* xv = x.value().data();
    for (std::size_t bi = 0; bi < B; ++bi) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ky = 0; ky < K; ++ky) {
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const std::size_t row = (c * K + ky) * K + kx;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                        if (iy < 0 || iy >= static_cast<long>(H)) {
                            continue;
                        }
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                            if (ix < 0 || ix >= static_cast<long>(W)) {
                                continue;
                            }
                            (*cols)(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(bi * P + oy * Wo + ox)) =
                                xv[((bi * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
        }
    }
    RowMat y = CMapMat(w.value().data(), O, CKK) * (*cols);  // [O, B*P]
    Tensor out({B, O, Ho, Wo});
    for (std::size_t bi = 0; bi < B; ++bi) {
        for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t p = 0; p < P; ++p) {
                out[(bi * O + o) * P + p] = y(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(bi * P + p)) +
                                            b.value()[o];
            }
        }
    }
    auto nx = N(x), nw = N(w), nb = N(b);
    return record(std::move(out), {nx, nw, nb},
                  [nx, nw, nb, cols, B, C, H, W, O, K, Ho, Wo, P, BP, CKK, stride, pad](detail::Node& self) {
                      RowMat gy(static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(BP));
                      for (std::size_t bi = 0; bi < B; ++bi) {
                          for (std::size_t o = 0; o < O; ++o) {
                              for (std::size_t p = 0; p < P; ++p) {
                                  gy(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(bi * P + p)) =
                                      self.grad[(bi * O + o) * P + p];
                              }
                          }
                      }
                      if (nb->requires_grad) {
                          auto& g = nb->ensure_grad();
                          for (std::size_t o = 0; o < O; ++o) {
                              g[o] += gy.row(static_cast<Eigen::Index>(o)).sum();
                          }
                      }
                      if (nw->requires_grad) {
                          MapMat(nw->ensure_grad().data(), O, CKK).noalias() += gy * cols->transpose();
                      }
                      if (nx->requires_grad) {
                          RowMat gcols = CMapMat(nw->value.data(), O, CKK).transpose() * gy;
                          auto& g = nx->ensure_grad();
                          for (std::size_t bi = 0; bi < B; ++bi) {
                              for (std::size_t c = 0; c < C; ++c) {
                                  for (std::size_t ky = 0; ky < K; ++ky) {
                                      for (std::size_t kx = 0; kx < K; ++kx) {
                                          const std::size_t row = (c * K + ky) * K + kx;
                                          for (std::size_t oy = 0; oy < Ho; ++oy) {
                                              const long iy =
                                                  static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                              if (iy < 0 || iy >= static_cast<long>(H)) {
                                                  continue;
                                              }
                                              for (std::size_t ox = 0; ox < Wo; ++ox) {
                                                  const long ix =
                                                      static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                                  if (ix < 0 || ix >= static_cast<long>(W)) {
                                                      continue;
                                                  }
                                                  g[((bi * C + c) * H + static_cast<std::size_t>(iy)) * W +
                                                    static_cast<std::size_t>(ix)] +=
                                                      gcols(static_cast<Eigen::Index>(row),
                                                            static_cast<Eigen::Index>(bi * P + oy * Wo + ox));
                                              }
                                          }
                                      }
                                  }
                              }
                          }
                      }
                  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps) {
    const auto& xs = x.shape();
    require(xs.size() >= 2, "group_norm: need [B, C, ...]");
    const std::size_t B = xs[0], C = xs[1];
    require(groups > 0 && C % groups == 0, "group_norm: channels not divisible by groups");
    require(gamma.value().size() == C && beta.value().size() == C, "group_norm: affine size mismatch");
    std::size_t S = 1;
    for (std::size_t i = 2; i < xs.size(); ++i) {
        S *= xs[i];
    }
    const std::size_t Cg = C / groups, M = Cg * S;
    Tensor out(xs);
    Tensor xhat(xs);
    std::vector<double> inv_std(B * groups);
    const auto& xv = x.value();
    for (std::size_t bi = 0; bi < B; ++bi) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (bi * C + gi * Cg) * S;
            double mu = 0.0;
            for (std::size_t k = 0; k < M; ++k) {
                mu += xv[base + k];
            }
            mu /= static_cast<double>(M);
            double var = 0.0;
            for (std::size_t k = 0; k < M; ++k) {
                const double d = xv[base + k] - mu;
                var += d * d;
            }
            var /= static_cast<double>(M);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[bi * groups + gi] = is;
            for (std::size_t k = 0; k < M; ++k) {
                const std::size_t c = gi * Cg + k / S;
                const double h = (xv[base + k] - mu) * is;
                xhat[base + k] = h;
                out[base + k] = gamma.value()[c] * h + beta.value()[c];
            }
        }
    }
    auto nx = N(x), ng = N(gamma), nb = N(beta);
    return record(std::move(out), {nx, ng, nb},
                  [nx, ng, nb, xhat, inv_std, B, C, S, Cg, M, groups](detail::Node& self) {
                      const auto& gy = self.grad;
                      if (ng->requires_grad || nb->requires_grad) {
                          auto& gg = ng->ensure_grad();
                          auto& gb = nb->ensure_grad();
                          for (std::size_t bi = 0; bi < B; ++bi) {
                              for (std::size_t c = 0; c < C; ++c) {
                                  for (std::size_t s = 0; s < S; ++s) {
                                      const std::size_t i = (bi * C + c) * S + s;
                                      gg[c] += gy[i] * xhat[i];
                                      gb[c] += gy[i];
                                  }
                              }
                          }
                      }
                      if (nx->requires_grad) {
                          auto& gx = nx->ensure_grad();
                          for (std::size_t bi = 0; bi < B; ++bi) {
                              for (std::size_t gi = 0; gi < groups; ++gi) {
                                  const std::size_t base = (bi * C + gi * Cg) * S;
                                  double m1 = 0.0, m2 = 0.0;
                                  for (std::size_t k = 0; k < M; ++k) {
                                      const double dh = gy[base + k] * ng->value[gi * Cg + k / S];
                                      m1 += dh;
                                      m2 += dh * xhat[base + k];
                                  }
                                  m1 /= static_cast<double>(M);
                                  m2 /= static_cast<double>(M);
                                  const double is = inv_std[bi * groups + gi];
                                  for (std::size_t k = 0; k < M; ++k) {
                                      const double dh = gy[base + k] * ng->value[gi * Cg + k / S];
                                      gx[base + k] += is * (dh - m1 - xhat[base + k] * m2);
                                  }
                              }
                          }
                      }
                  });
}

Var global_avg_pool(const Var& x) {
    const auto& xs = x.shape();
    require(xs.size() >= 3, "global_avg_pool: need [B, C, spatial...]");
    const std::size_t B = xs[0], C = xs[1], S = x.value().size() / (B * C);
    Tensor out({B, C});
    for (std::size_t i = 0; i < B * C; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < S; ++k) {
            s += x.value()[i * S + k];
        }
        out[i] = s / static_cast<double>(S);
    }
    auto nx = N(x);
    return record(std::move(out), {nx}, [nx, B, C, S](detail::Node& self) {
        auto& g = nx->ensure_grad();
        for (std::size_t i = 0; i < B * C; ++i) {
            for (std::size_t k = 0; k < S; ++k) {
                g[i * S + k] += self.grad[i] / static_cast<double>(S);
            }
        }
    });
}

Var softmax_rows(const Var& a) {
    const std::size_t B = a.rows(), L = a.cols();
    Tensor out({B, L});
    for (std::size_t r = 0; r < B; ++r) {
        double mx = -1e300;
        for (std::size_t j = 0; j < L; ++j) {
            mx = std::max(mx, a.value()[r * L + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
            out[r * L + j] = std::exp(a.value()[r * L + j] - mx);
            z += out[r * L + j];
        }
        for (std::size_t j = 0; j < L; ++j) {
            out[r * L + j] /= z;
        }
    }
    auto na = N(a);
    Tensor y = out;
    return record(std::move(out), {na}, [na, y, B, L](detail::Node& self) {
        auto& g = na->ensure_grad();
        for (std::size_t r = 0; r < B; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < L; ++j) {
                dot += self.grad[r * L + j] * y[r * L + j];
            }
            for (std::size_t j = 0; j < L; ++j) {
                g[r * L + j] += y[r * L + j] * (self.grad[r * L + j] - dot);
            }
        }
    });
}

Var token_dot(const Var& q, const Var& k, std::size_t tokens) {
    const std::size_t B = q.rows(), d = q.cols();
    require(k.rows() == B * tokens && k.cols() == d, "token_dot: key shape mismatch");
    Tensor out({B, tokens});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t l = 0; l < tokens; ++l) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                s += q.value()[b * d + j] * k.value()[(b * tokens + l) * d + j];
            }
            out[b * tokens + l] = s;
        }
    }
    auto nq = N(q), nk = N(k);
    return record(std::move(out), {nq, nk}, [nq, nk, B, d, tokens](detail::Node& self) {
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t l = 0; l < tokens; ++l) {
                const double gs = self.grad[b * tokens + l];
                for (std::size_t j = 0; j < d; ++j) {
                    if (nq->requires_grad) {
                        nq->ensure_grad()[b * d + j] += gs * nk->value[(b * tokens + l) * d + j];
                    }
                    if (nk->requires_grad) {
                        nk->ensure_grad()[(b * tokens + l) * d + j] += gs * nq->value[b * d + j];
                    }
                }
            }
        }
    });
}

Var token_mix(const Var& weights, const Var& v) {
    const std::size_t B = weights.rows(), L = weights.cols();
    require(v.rows() == B * L, "token_mix: value shape mismatch");
    const std::size_t d = v.cols();
    Tensor out({B, d});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t l = 0; l < L; ++l) {
            const double a = weights.value()[b * L + l];
            for (std::size_t j = 0; j < d; ++j) {
                out[b * d + j] += a * v.value()[(b * L + l) * d + j];
            }
        }
    }
    auto nw = N(weights), nv = N(v);
    return record(std::move(out), {nw, nv}, [nw, nv, B, L, d](detail::Node& self) {
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t l = 0; l < L; ++l) {
                double ga = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    ga += self.grad[b * d + j] * nv->value[(b * L + l) * d + j];
                    if (nv->requires_grad) {
                        nv->ensure_grad()[(b * L + l) * d + j] += self.grad[b * d + j] * nw->value[b * L + l];
                    }
                }
                if (nw->requires_grad) {
                    nw->ensure_grad()[b * L + l] += ga;
                }
            }
        }
    });
}

}  // namespace ops
}  // namespace dollar
