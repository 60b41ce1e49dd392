#include "iconlab/autograd.hpp"

#include "iconlab/error.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace iconlab::ag {

namespace {

using NodePtr = std::shared_ptr<Node>;

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    for (const auto& p : parents) {
        if (p.requires_grad()) {
            node->requires_grad = true;
        }
    }
    if (node->requires_grad) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) {
            node->parents.push_back(p.node());
        }
        node->backward_fn = std::move(fn);
    }
    return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
    }
}

bool wants(const NodePtr& p) { return p->requires_grad; }

// Applies an elementwise unary op whose derivative depends on (x, y).
template <class F, class D>
Var unary(const Var& a, F f, D dfdx) {
    Tensor out = Tensor::zeros_like(a.value());
    const auto& x = a.value().storage();
    auto& y = out.storage();
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = f(x[i]);
    }
    return make_op(std::move(out), {a}, [dfdx](Node& self) {
        const auto& p = self.parents[0];
        auto& g = p->grad_buffer().storage();
        const auto& x = p->value.storage();
        const auto& y = self.value.storage();
        const auto& gy = self.grad.storage();
        for (std::size_t i = 0; i < x.size(); ++i) {
            g[i] += gy[i] * dfdx(x[i], y[i]);
        }
    });
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) {
        grad = Tensor::zeros_like(value);
    }
    return grad;
}

Var Var::constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var Var::leaf(Tensor value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
}

Tensor Var::grad() const {
    if (node_->grad.size() == node_->value.size() && !node_->grad.empty()) {
        return node_->grad;
    }
    return Tensor::zeros_like(node_->value);
}

void backward(const Var& loss) {
    if (!loss.defined() || loss.value().size() != 1) {
        throw ContractError("backward() needs a one-element loss, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
}

// ---- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw ConfigError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                          shape_string(bv.shape()));
    }
    Tensor out = Tensor::matrix(av.rows(), bv.cols());
    out.mat().noalias() = av.mat() * bv.mat();
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        const auto g = self.grad.mat();
        if (wants(pa)) {
            pa->grad_buffer().mat().noalias() += g * pb->value.mat().transpose();
        }
        if (wants(pb)) {
            pb->grad_buffer().mat().noalias() += pa->value.mat().transpose() * g;
        }
    });
}

Var add_row(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    if (static_cast<std::int64_t>(b.value().size()) != av.cols()) {
        throw ConfigError("add_row: bias of size " + std::to_string(b.value().size()) + " for " +
                          shape_string(av.shape()));
    }
    Tensor out = av;
    const Eigen::Map<const Eigen::RowVectorXd> bias(b.value().storage().data(), av.cols());
    out.mat().rowwise() += bias;
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        if (wants(pa)) {
            pa->grad_buffer().mat() += self.grad.mat();
        }
        if (wants(pb)) {
            Eigen::Map<Eigen::RowVectorXd> gb(pb->grad_buffer().storage().data(), self.value.cols());
            gb += self.grad.mat().colwise().sum();
        }
    });
}

// ---- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    out.mat() += b.value().mat();
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (const auto& p : self.parents) {
            if (wants(p)) {
                p->grad_buffer().mat() += self.grad.mat();
            }
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    out.mat() -= b.value().mat();
    return make_op(std::move(out), {a, b}, [](Node& self) {
        if (wants(self.parents[0])) {
            self.parents[0]->grad_buffer().mat() += self.grad.mat();
        }
        if (wants(self.parents[1])) {
            self.parents[1]->grad_buffer().mat() -= self.grad.mat();
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    out.mat().array() *= b.value().mat().array();
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        if (wants(pa)) {
            pa->grad_buffer().mat().array() += self.grad.mat().array() * pb->value.mat().array();
        }
        if (wants(pb)) {
            pb->grad_buffer().mat().array() += self.grad.mat().array() * pa->value.mat().array();
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    out.mat() *= s;
    return make_op(std::move(out), {a}, [s](Node& self) {
        self.parents[0]->grad_buffer().mat() += s * self.grad.mat();
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    out.mat().array() += s;
    return make_op(std::move(out), {a}, [](Node& self) { self.parents[0]->grad_buffer().mat() += self.grad.mat(); });
}

Var square(const Var& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var exp(const Var& a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var relu(const Var& a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var clamp_max(const Var& a, double cap) {
    return unary(
        a, [cap](double x) { return x > cap ? cap : x; }, [cap](double x, double) { return x > cap ? 0.0 : 1.0; });
}

namespace {
constexpr double kGeluC = 0.79788456080286535588;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;
}  // namespace

Var gelu(const Var& a) {
    // 0.5 x (1 + tanh(u)) = x * sigmoid(2u); one vectorised exp per entry.
    const double c = kGeluC;
    const double k = kGeluK;
    const auto x = a.value().mat().array();
    auto sig = std::make_shared<Tensor>(Tensor::zeros_like(a.value()));
    sig->mat().array() = 1.0 / (1.0 + (-2.0 * c * (x + k * x.cube())).exp());
    Tensor out = Tensor::zeros_like(a.value());
    out.mat().array() = x * sig->mat().array();
    return make_op(std::move(out), {a}, [sig, c, k](Node& self) {
        const auto& p = self.parents[0];
        const auto x = p->value.mat().array();
        const auto s = sig->mat().array();
        p->grad_buffer().mat().array() +=
            self.grad.mat().array() * (s + 2.0 * c * x * s * (1.0 - s) * (1.0 + 3.0 * k * x.square()));
    });
}

// ---- reductions -----------------------------------------------------------

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().storage()) {
        s += v;
    }
    return make_op(Tensor::scalar(s), {a}, [](Node& self) {
        const double g = self.grad[0];
        for (double& v : self.parents[0]->grad_buffer().storage()) {
            v += g;
        }
    });
}

Var mean(const Var& a) {
    const auto n = static_cast<double>(a.value().size());
    if (n == 0) {
        throw ContractError("mean of an empty tensor");
    }
    return scale(sum(a), 1.0 / n);
}

Var weighted_sum(const Var& a, const Tensor& weights) {
    if (weights.size() != a.value().size()) {
        throw ConfigError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(a.value().size()) + " entries");
    }
    double s = 0.0;
    const auto& x = a.value().storage();
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += weights[i] * x[i];
    }
    return make_op(Tensor::scalar(s), {a}, [weights](Node& self) {
        const double g = self.grad[0];
        auto& ga = self.parents[0]->grad_buffer().storage();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += g * weights[i];
        }
    });
}

Var group_mean(const Var& a, const std::vector<std::int64_t>& group_sizes) {
    std::int64_t total = 0;
    for (auto n : group_sizes) {
        if (n <= 0) {
            throw ContractError("group_mean: empty group");
        }
        total += n;
    }
    if (total != static_cast<std::int64_t>(a.value().size())) {
        throw ContractError("group_mean: group sizes cover " + std::to_string(total) + " of " +
                            std::to_string(a.value().size()) + " rows");
    }
    Tensor out = Tensor::matrix(static_cast<std::int64_t>(group_sizes.size()), 1);
    const auto& x = a.value().storage();
    std::size_t at = 0;
    for (std::size_t g = 0; g < group_sizes.size(); ++g) {
        double s = 0.0;
        for (std::int64_t i = 0; i < group_sizes[g]; ++i) {
            s += x[at++];
        }
        out[g] = s / static_cast<double>(group_sizes[g]);
    }
    return make_op(std::move(out), {a}, [group_sizes](Node& self) {
        auto& ga = self.parents[0]->grad_buffer().storage();
        std::size_t at = 0;
        for (std::size_t g = 0; g < group_sizes.size(); ++g) {
            const double share = self.grad[g] / static_cast<double>(group_sizes[g]);
            for (std::int64_t i = 0; i < group_sizes[g]; ++i) {
                ga[at++] += share;
            }
        }
    });
}

// ---- row plumbing ---------------------------------------------------------

Var gather_rows(const Var& a, const std::vector<std::int64_t>& rows) {
    const Tensor& av = a.value();
    const std::int64_t cols = av.cols();
    Tensor out = Tensor::matrix(static_cast<std::int64_t>(rows.size()), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= av.rows()) {
            throw ContractError("gather_rows: row " + std::to_string(rows[i]) + " out of range " +
                                std::to_string(av.rows()));
        }
        out.mat().row(static_cast<Eigen::Index>(i)) = av.mat().row(rows[i]);
    }
    return make_op(std::move(out), {a}, [rows](Node& self) {
        auto ga = self.parents[0]->grad_buffer().mat();
        const auto g = self.grad.mat();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
        }
    });
}

Var concat_rows(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.cols()) {
        throw ConfigError("concat_rows: column mismatch " + shape_string(av.shape()) + " vs " +
                          shape_string(bv.shape()));
    }
    Tensor out = Tensor::matrix(av.rows() + bv.rows(), av.cols());
    out.mat().topRows(av.rows()) = av.mat();
    out.mat().bottomRows(bv.rows()) = bv.mat();
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        const auto na = pa->value.rows();
        if (wants(pa)) {
            pa->grad_buffer().mat() += self.grad.mat().topRows(na);
        }
        if (wants(pb)) {
            pb->grad_buffer().mat() += self.grad.mat().bottomRows(pb->value.rows());
        }
    });
}

Var set_column(const Var& base, const std::vector<std::int64_t>& rows, std::int64_t col, const Var& values) {
    if (values.value().size() != rows.size()) {
        throw ContractError("set_column: " + std::to_string(values.value().size()) + " values for " +
                            std::to_string(rows.size()) + " rows");
    }
    Tensor out = base.value();
    if (col < 0 || col >= out.cols()) {
        throw ContractError("set_column: column out of range");
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out(rows[i], col) = values.value()[i];
    }
    return make_op(std::move(out), {base, values}, [rows, col](Node& self) {
        const auto& pbase = self.parents[0];
        const auto& pval = self.parents[1];
        if (wants(pbase)) {
            Tensor g = self.grad;
            for (auto r : rows) {
                g(r, col) = 0.0;
            }
            pbase->grad_buffer().mat() += g.mat();
        }
        if (wants(pval)) {
            auto& gv = pval->grad_buffer().storage();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                gv[i] += self.grad(rows[i], col);
            }
        }
    });
}

// ---- transformer pieces ---------------------------------------------------

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = x.value();
    const auto n = xv.rows();
    const auto d = xv.cols();
    if (static_cast<std::int64_t>(gamma.value().size()) != d || static_cast<std::int64_t>(beta.value().size()) != d) {
        throw ConfigError("layer_norm: affine parameters do not match width " + std::to_string(d));
    }
    auto xhat = std::make_shared<Tensor>(Tensor::matrix(n, d));
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    Tensor out = Tensor::matrix(n, d);
    const Eigen::Map<const Eigen::RowVectorXd> g(gamma.value().storage().data(), d);
    const Eigen::Map<const Eigen::RowVectorXd> b(beta.value().storage().data(), d);
    auto xm = xv.mat();
    auto hm = xhat->mat();
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = xm.row(r).mean();
        const double var = (xm.row(r).array() - mu).square().mean();
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(r)] = rs;
        hm.row(r) = (xm.row(r).array() - mu) * rs;
    }
    out.mat() = (hm.array().rowwise() * g.array()).rowwise() + b.array();
    return make_op(std::move(out), {x, gamma, beta}, [xhat, rstd, d](Node& self) {
        const auto& px = self.parents[0];
        const auto& pg = self.parents[1];
        const auto& pb = self.parents[2];
        const auto gy = self.grad.mat();
        const auto hm = xhat->mat();
        if (wants(pg)) {
            Eigen::Map<Eigen::RowVectorXd> gg(pg->grad_buffer().storage().data(), d);
            gg += (gy.array() * hm.array()).colwise().sum().matrix();
        }
        if (wants(pb)) {
            Eigen::Map<Eigen::RowVectorXd> gb(pb->grad_buffer().storage().data(), d);
            gb += gy.colwise().sum();
        }
        if (wants(px)) {
            const Eigen::Map<const Eigen::RowVectorXd> g(pg->value.storage().data(), d);
            auto gx = px->grad_buffer().mat();
            Eigen::RowVectorXd dxhat(d);
            for (Eigen::Index r = 0; r < gy.rows(); ++r) {
                dxhat = gy.row(r).cwiseProduct(g);
                const double m1 = dxhat.mean();
                const double m2 = dxhat.dot(hm.row(r)) / static_cast<double>(d);
                gx.row(r).array() += (*rstd)[static_cast<std::size_t>(r)] *
                                     (dxhat.array() - m1 - hm.row(r).array() * m2);
            }
        }
    });
}

Var causal_attention(const Var& q, const Var& k, const Var& v, const std::vector<std::int64_t>& seq_offsets,
                     int n_heads) {
    const Tensor& qv = q.value();
    const auto total = qv.rows();
    const auto d = qv.cols();
    if (k.shape() != q.shape() || v.shape() != q.shape()) {
        throw ConfigError("causal_attention: q/k/v shapes differ");
    }
    if (n_heads <= 0 || d % n_heads != 0) {
        throw ConfigError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    }
    if (seq_offsets.size() < 2 || seq_offsets.front() != 0 || seq_offsets.back() != total) {
        throw ContractError("causal_attention: sequence offsets do not cover the batch");
    }
    const auto dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto n_seq = seq_offsets.size() - 1;

    // Attention probabilities are kept for the backward pass, one lower
    // triangular block per (sequence, head).
    auto probs = std::make_shared<std::vector<RowMatrix>>(n_seq * static_cast<std::size_t>(n_heads));
    Tensor out = Tensor::matrix(total, d);
    auto qm = qv.mat();
    auto km = k.value().mat();
    auto vm = v.value().mat();
    auto om = out.mat();
    for (std::size_t s = 0; s < n_seq; ++s) {
        const auto off = seq_offsets[s];
        const auto n = seq_offsets[s + 1] - off;
        if (n <= 0) {
            throw ContractError("causal_attention: empty sequence");
        }
        for (int h = 0; h < n_heads; ++h) {
            RowMatrix& p = (*probs)[s * static_cast<std::size_t>(n_heads) + static_cast<std::size_t>(h)];
            p.setZero(n, n);
            const auto qh = qm.block(off, h * dh, n, dh);
            const auto kh = km.block(off, h * dh, n, dh);
            p.triangularView<Eigen::Lower>() = qh * kh.transpose();
            for (Eigen::Index i = 0; i < n; ++i) {
                auto row = p.row(i).head(i + 1);
                row *= scale;
                const double mx = row.maxCoeff();
                row = (row.array() - mx).exp();
                row /= row.sum();
            }
            om.block(off, h * dh, n, dh).noalias() = p.triangularView<Eigen::Lower>() * vm.block(off, h * dh, n, dh);
        }
    }
    return make_op(std::move(out), {q, k, v}, [probs, seq_offsets, n_heads, dh, scale](Node& self) {
        const auto& pq = self.parents[0];
        const auto& pk = self.parents[1];
        const auto& pv = self.parents[2];
        const auto gm = self.grad.mat();
        auto qm = pq->value.mat();
        auto km = pk->value.mat();
        auto vm = pv->value.mat();
        const bool need_qk = wants(pq) || wants(pk);
        RowMatrix dp;
        for (std::size_t s = 0; s + 1 < seq_offsets.size(); ++s) {
            const auto off = seq_offsets[s];
            const auto n = seq_offsets[s + 1] - off;
            for (int h = 0; h < n_heads; ++h) {
                const RowMatrix& p = (*probs)[s * static_cast<std::size_t>(n_heads) + static_cast<std::size_t>(h)];
                const auto go = gm.block(off, h * dh, n, dh);
                if (wants(pv)) {
                    pv->grad_buffer().mat().block(off, h * dh, n, dh).noalias() +=
                        p.triangularView<Eigen::Lower>().transpose() * go;
                }
                if (!need_qk) {
                    continue;
                }
                dp.setZero(n, n);
                dp.triangularView<Eigen::Lower>() = go * vm.block(off, h * dh, n, dh).transpose();
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double dot = p.row(i).head(i + 1).dot(dp.row(i).head(i + 1));
                    dp.row(i).head(i + 1) =
                        (p.row(i).head(i + 1).array() * (dp.row(i).head(i + 1).array() - dot)) * scale;
                }
                if (wants(pq)) {
                    pq->grad_buffer().mat().block(off, h * dh, n, dh).noalias() +=
                        dp.triangularView<Eigen::Lower>() * km.block(off, h * dh, n, dh);
                }
                if (wants(pk)) {
                    pk->grad_buffer().mat().block(off, h * dh, n, dh).noalias() +=
                        dp.triangularView<Eigen::Lower>().transpose() * qm.block(off, h * dh, n, dh);
                }
            }
        }
    });
}

}  // namespace iconlab::ag
