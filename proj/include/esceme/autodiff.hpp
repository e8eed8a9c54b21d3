#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace esceme::ad {

// Dense row-major matrix of doubles.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

    static Matrix row_vector(std::span<const double> v);
    static Matrix from_rows(const std::vector<std::vector<double>>& rows);

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)]; }
    std::size_t size() const { return data.size(); }
    std::span<const double> row(int r) const { return {data.data() + static_cast<std::ptrdiff_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    bool all_finite() const;

    bool operator==(const Matrix&) const = default;
};

struct Node {
    Matrix value;
    Matrix grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Matrix& grad_buffer();
};

// Handle to a node of the computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    int rows() const { return node_->value.rows; }
    int cols() const { return node_->value.cols; }
    double scalar() const;
    double at(int r, int c) const { return node_->value(r, c); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    // Zero-filled if nothing has been accumulated yet.
    const Matrix& grad() const;
    void zero_grad();

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

Var constant(Matrix m);
Var constant_row(std::span<const double> v);
// Leaf that accumulates gradients across backward passes.
Var parameter(Matrix m);

// While alive, new ops record no parents or backward closures.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Reverse sweep from a 1x1 root; gradients accumulate into leaves.
void backward(const Var& root);

// --- ops -------------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);  // broadcast a 1xC row over every row of a
Var mul(const Var& a, const Var& b);        // element-wise
Var mul_row(const Var& a, const Var& row);  // element-wise with a broadcast row
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var tanh(const Var& a);
Var gelu(const Var& a);  // x * Phi(x), exact erf form
Var square(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, int begin, int end);
Var row(const Var& a, int r);
Var gather_rows(const Var& table, std::span<const int> indices);
Var pick(const Var& a, int r, int c);
Var sum(const Var& a);
Var sum_rows(const Var& a);   // 1xC column sums
Var mean_rows(const Var& a);  // 1xC column means
Var detach(const Var& a);

// Row-wise softmax of a + mask, where mask holds 0 or -inf.
Var softmax_rows(const Var& a, const Matrix& mask);

// Log-softmax over a column of logits; rows with allowed[i] == false get -inf
// and receive no gradient. At least one row must be allowed.
Var masked_log_softmax(const Var& logits, std::span<const char> allowed);

// a, b hold n*n positions x C channels, position (i, j) at row i*n + j.
// Output channel c is the n x n matrix product a[:,:,c] * b[:,:,c].
Var channel_matmul(const Var& a, const Var& b, int n);

}  // namespace esceme::ad
