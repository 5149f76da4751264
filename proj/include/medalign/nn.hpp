#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace medalign::nn {

using Matrix = Eigen::MatrixXd;

struct Node {
    Matrix value;
    Matrix grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Matrix& ensure_grad() {
        if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

// Value handle into the tape. Copies share the node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    Matrix& grad() { return node_->ensure_grad(); }
    double scalar() const;  // requires 1x1
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool defined() const { return node_ != nullptr; }
    bool requires_grad() const { return node_->requires_grad; }
    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

Tensor constant(Matrix v);
Tensor parameter(Matrix v);
Tensor scalar_constant(double v);

// Graph construction is skipped inside a NoGradGuard; forward values are
// still computed.
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

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add_rowvec(const Tensor& a, const Tensor& row);  // row: 1xC
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor mean_rows(const Tensor& a);  // 1xC
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);
Tensor rows_from(const Tensor& table, const std::vector<int>& ids);
Tensor rowwise_dot(const Tensor& a, const Tensor& b);  // Rx1
Tensor logsumexp_all(const Tensor& a);                 // 1x1
Tensor sum_all(const Tensor& a);                       // 1x1
// mean of (logsumexp(row) - row[target]) over rows
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);
Tensor stack_scalars(const std::vector<std::vector<Tensor>>& grid);

void backward(const Tensor& root);

// Decoupled weight decay Adam over named parameters.
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1,
          double beta2, double weight_decay, double eps = 1e-8);

    void step();
    void zero_grad();

    int64_t steps_taken() const { return t_; }
    // moment access for checkpoint round trips
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    Matrix& first_moment(size_t i) { return m_[i]; }
    Matrix& second_moment(size_t i) { return v_[i]; }
    void set_steps_taken(int64_t t) { t_ = t; }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    double lr_, beta1_, beta2_, wd_, eps_;
    int64_t t_ = 0;
};

}  // namespace medalign::nn
