#include "medalign/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace medalign::nn {

namespace {

thread_local bool g_grad_enabled = true;

NodePtr make_node(Matrix value, std::vector<NodePtr> parents,
                  std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (g_grad_enabled && any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return n;
}

void expect(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

double Tensor::scalar() const {
    expect(node_->value.rows() == 1 && node_->value.cols() == 1, "scalar(): tensor is not 1x1");
    return node_->value(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor constant(Matrix v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return Tensor(n);
}

Tensor parameter(Matrix v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Tensor(n);
}

Tensor scalar_constant(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
}

Tensor add(const Tensor& a, const Tensor& b) {
    expect(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value() + b.value(), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) pa->ensure_grad() += self.grad;
        if (pb->requires_grad) pb->ensure_grad() += self.grad;
    }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    expect(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value() - b.value(), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) pa->ensure_grad() += self.grad;
        if (pb->requires_grad) pb->ensure_grad() -= self.grad;
    }));
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    expect(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value().cwiseProduct(b.value()), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) pa->ensure_grad() += self.grad.cwiseProduct(pb->value);
        if (pb->requires_grad) pb->ensure_grad() += self.grad.cwiseProduct(pa->value);
    }));
}

Tensor scale(const Tensor& a, double s) {
    auto pa = a.node();
    return Tensor(make_node(a.value() * s, {pa}, [pa, s](Node& self) {
        pa->ensure_grad() += s * self.grad;
    }));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    expect(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value() * b.value(), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) pa->ensure_grad() += self.grad * pb->value.transpose();
        if (pb->requires_grad) pb->ensure_grad() += pa->value.transpose() * self.grad;
    }));
}

Tensor transpose(const Tensor& a) {
    auto pa = a.node();
    return Tensor(make_node(a.value().transpose(), {pa}, [pa](Node& self) {
        pa->ensure_grad() += self.grad.transpose();
    }));
}

Tensor add_rowvec(const Tensor& a, const Tensor& row) {
    expect(row.rows() == 1 && row.cols() == a.cols(), "add_rowvec: row must be 1xC");
    auto pa = a.node(), pr = row.node();
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return Tensor(make_node(std::move(out), {pa, pr}, [pa, pr](Node& self) {
        if (pa->requires_grad) pa->ensure_grad() += self.grad;
        if (pr->requires_grad) pr->ensure_grad() += self.grad.colwise().sum();
    }));
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    expect(start >= 0 && count >= 1 && start + count <= a.rows(), "slice_rows: out of range");
    auto pa = a.node();
    return Tensor(make_node(a.value().middleRows(start, count), {pa}, [pa, start, count](Node& self) {
        pa->ensure_grad().middleRows(start, count) += self.grad;
    }));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    expect(!parts.empty(), "concat_rows: empty");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    std::vector<NodePtr> ps;
    ps.reserve(parts.size());
    for (const auto& p : parts) {
        expect(p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
        ps.push_back(p.node());
    }
    Matrix out(rows, cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleRows(off, p.rows()) = p.value();
        off += p.rows();
    }
    return Tensor(make_node(std::move(out), ps, [ps](Node& self) {
        Eigen::Index off = 0;
        for (const auto& p : ps) {
            const Eigen::Index r = p->value.rows();
            if (p->requires_grad) p->ensure_grad() += self.grad.middleRows(off, r);
            off += r;
        }
    }));
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    expect(start >= 0 && count >= 1 && start + count <= a.cols(), "slice_cols: out of range");
    auto pa = a.node();
    return Tensor(make_node(a.value().middleCols(start, count), {pa}, [pa, start, count](Node& self) {
        pa->ensure_grad().middleCols(start, count) += self.grad;
    }));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    expect(!parts.empty(), "concat_cols: empty");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    std::vector<NodePtr> ps;
    ps.reserve(parts.size());
    for (const auto& p : parts) {
        expect(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
        ps.push_back(p.node());
    }
    Matrix out(rows, cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return Tensor(make_node(std::move(out), ps, [ps](Node& self) {
        Eigen::Index off = 0;
        for (const auto& p : ps) {
            const Eigen::Index c = p->value.cols();
            if (p->requires_grad) p->ensure_grad() += self.grad.middleCols(off, c);
            off += c;
        }
    }));
}

Tensor mean_rows(const Tensor& a) {
    auto pa = a.node();
    const double inv = 1.0 / static_cast<double>(a.rows());
    Matrix out = a.value().colwise().mean();
    return Tensor(make_node(std::move(out), {pa}, [pa, inv](Node& self) {
        pa->ensure_grad().rowwise() += (inv * self.grad).row(0);
    }));
}

Tensor softmax_rows(const Tensor& a) {
    auto pa = a.node();
    Matrix y = a.value();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double m = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    return Tensor(make_node(std::move(y), {pa}, [pa](Node& self) {
        Matrix& da = pa->ensure_grad();
        for (Eigen::Index r = 0; r < self.value.rows(); ++r) {
            const double dot = self.grad.row(r).dot(self.value.row(r));
            da.row(r) += self.value.row(r).cwiseProduct((self.grad.row(r).array() - dot).matrix());
        }
    }));
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    expect(gain.rows() == 1 && gain.cols() == a.cols(), "layer_norm: gain must be 1xC");
    expect(bias.rows() == 1 && bias.cols() == a.cols(), "layer_norm: bias must be 1xC");
    auto pa = a.node(), pg = gain.node(), pb = bias.node();
    const Eigen::Index R = a.rows(), C = a.cols();
    Matrix xhat(R, C);
    Eigen::VectorXd invstd(R);
    for (Eigen::Index r = 0; r < R; ++r) {
        const double mu = a.value().row(r).mean();
        const auto centered = a.value().row(r).array() - mu;
        const double var = centered.square().mean();
        invstd(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = centered.matrix() * invstd(r);
    }
    Matrix out = xhat;
    for (Eigen::Index r = 0; r < R; ++r) {
        out.row(r) = out.row(r).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    }
    return Tensor(make_node(std::move(out), {pa, pg, pb},
                            [pa, pg, pb, xhat, invstd](Node& self) {
        const Eigen::Index R = self.value.rows(), C = self.value.cols();
        if (pg->requires_grad) {
            Matrix& dg = pg->ensure_grad();
            for (Eigen::Index r = 0; r < R; ++r) dg.row(0) += self.grad.row(r).cwiseProduct(xhat.row(r));
        }
        if (pb->requires_grad) pb->ensure_grad().row(0) += self.grad.colwise().sum();
        if (pa->requires_grad) {
            Matrix& da = pa->ensure_grad();
            const double invC = 1.0 / static_cast<double>(C);
            for (Eigen::Index r = 0; r < R; ++r) {
                Eigen::RowVectorXd dxhat = self.grad.row(r).cwiseProduct(pg->value.row(0));
                const double m1 = dxhat.mean();
                const double m2 = dxhat.cwiseProduct(xhat.row(r)).sum() * invC;
                da.row(r) += invstd(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
            }
        }
    }));
}

Tensor gelu(const Tensor& a) {
    auto pa = a.node();
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Matrix out = a.value().unaryExpr([inv_sqrt2](double x) {
        return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    });
    return Tensor(make_node(std::move(out), {pa}, [pa, inv_sqrt2, inv_sqrt2pi](Node& self) {
        Matrix d = pa->value.unaryExpr([inv_sqrt2, inv_sqrt2pi](double x) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
        pa->ensure_grad() += self.grad.cwiseProduct(d);
    }));
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
    auto pa = a.node();
    const Eigen::Index R = a.rows();
    Eigen::VectorXd invnorm(R);
    Matrix out = a.value();
    for (Eigen::Index r = 0; r < R; ++r) {
        invnorm(r) = 1.0 / std::sqrt(out.row(r).squaredNorm() + eps);
        out.row(r) *= invnorm(r);
    }
    return Tensor(make_node(std::move(out), {pa}, [pa, invnorm](Node& self) {
        Matrix& da = pa->ensure_grad();
        for (Eigen::Index r = 0; r < self.value.rows(); ++r) {
            const double dot = self.grad.row(r).dot(self.value.row(r));
            da.row(r) += invnorm(r) * (self.grad.row(r) - dot * self.value.row(r));
        }
    }));
}

Tensor rows_from(const Tensor& table, const std::vector<int>& ids) {
    expect(!ids.empty(), "rows_from: empty id list");
    auto pt = table.node();
    Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        expect(ids[i] >= 0 && ids[i] < table.rows(), "rows_from: id out of range");
        out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    return Tensor(make_node(std::move(out), {pt}, [pt, ids](Node& self) {
        Matrix& dt = pt->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            dt.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        }
    }));
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
    expect(a.rows() == b.rows() && a.cols() == b.cols(), "rowwise_dot: shape mismatch");
    auto pa = a.node(), pb = b.node();
    Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
    return Tensor(make_node(std::move(out), {pa, pb}, [pa, pb](Node& self) {
        for (Eigen::Index r = 0; r < self.value.rows(); ++r) {
            const double g = self.grad(r, 0);
            if (pa->requires_grad) pa->ensure_grad().row(r) += g * pb->value.row(r);
            if (pb->requires_grad) pb->ensure_grad().row(r) += g * pa->value.row(r);
        }
    }));
}

Tensor logsumexp_all(const Tensor& a) {
    auto pa = a.node();
    const double m = a.value().maxCoeff();
    const double s = (a.value().array() - m).exp().sum();
    Matrix out(1, 1);
    out(0, 0) = m + std::log(s);
    const double lse = out(0, 0);
    return Tensor(make_node(std::move(out), {pa}, [pa, lse](Node& self) {
        pa->ensure_grad() += self.grad(0, 0) * (pa->value.array() - lse).exp().matrix();
    }));
}

Tensor sum_all(const Tensor& a) {
    auto pa = a.node();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return Tensor(make_node(std::move(out), {pa}, [pa](Node& self) {
        pa->ensure_grad().array() += self.grad(0, 0);
    }));
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    expect(static_cast<Eigen::Index>(targets.size()) == logits.rows(),
           "cross_entropy_rows: target/row count mismatch");
    auto pl = logits.node();
    const Eigen::Index R = logits.rows();
    Matrix probs = logits.value();
    double total = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
        expect(targets[r] >= 0 && targets[r] < logits.cols(), "cross_entropy_rows: bad target");
        const double m = probs.row(r).maxCoeff();
        probs.row(r) = (probs.row(r).array() - m).exp();
        const double z = probs.row(r).sum();
        probs.row(r) /= z;
        total += m + std::log(z) - logits.value()(r, targets[r]);
    }
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(R);
    return Tensor(make_node(std::move(out), {pl}, [pl, probs, targets](Node& self) {
        const double g = self.grad(0, 0) / static_cast<double>(probs.rows());
        Matrix& dl = pl->ensure_grad();
        for (Eigen::Index r = 0; r < probs.rows(); ++r) {
            dl.row(r) += g * probs.row(r);
            dl(r, targets[r]) -= g;
        }
    }));
}

Tensor stack_scalars(const std::vector<std::vector<Tensor>>& grid) {
    expect(!grid.empty() && !grid.front().empty(), "stack_scalars: empty grid");
    const Eigen::Index R = static_cast<Eigen::Index>(grid.size());
    const Eigen::Index C = static_cast<Eigen::Index>(grid.front().size());
    Matrix out(R, C);
    std::vector<NodePtr> ps;
    ps.reserve(static_cast<size_t>(R * C));
    for (Eigen::Index r = 0; r < R; ++r) {
        expect(static_cast<Eigen::Index>(grid[r].size()) == C, "stack_scalars: ragged grid");
        for (Eigen::Index c = 0; c < C; ++c) {
            out(r, c) = grid[r][c].scalar();
            ps.push_back(grid[r][c].node());
        }
    }
    return Tensor(make_node(std::move(out), ps, [ps, C](Node& self) {
        for (Eigen::Index r = 0; r < self.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < C; ++c) {
                const auto& p = ps[static_cast<size_t>(r * C + c)];
                if (p->requires_grad) p->ensure_grad()(0, 0) += self.grad(r, c);
            }
        }
    }));
}

void backward(const Tensor& root) {
    expect(root.rows() == 1 && root.cols() == 1, "backward: root must be 1x1");
    if (!root.node()->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1,
             double beta2, double weight_decay, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& [name, p] : params_) {
        m_.push_back(Matrix::Zero(p.rows(), p.cols()));
        v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        const Matrix& g = p.node()->grad.size() != 0
                              ? p.node()->grad
                              : (p.node()->grad = Matrix::Zero(p.rows(), p.cols()));
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
        const Matrix mhat = m_[i] / bc1;
        const Matrix vhat = v_[i] / bc2;
        const Matrix denom = (vhat.array().sqrt() + eps_).matrix();
        p.value() -= lr_ * (mhat.cwiseQuotient(denom) + wd_ * p.value());
    }
}

void AdamW::zero_grad() {
    for (auto& [name, p] : params_) {
        if (p.node()->grad.size() != 0) p.node()->grad.setZero();
    }
}

}  // namespace medalign::nn
