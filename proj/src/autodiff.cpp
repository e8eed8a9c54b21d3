#include "esceme/autodiff.hpp"

#include "esceme/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

namespace esceme::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* what) {
    if (!cond) throw ConfigError(std::string("shape mismatch in ") + what);
}

// Creates the output node; parents and the closure are kept only when some
// parent needs a gradient and recording is enabled.
Var make(Matrix value, std::initializer_list<Var> parents, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.requires_grad()) node->requires_grad = true;
        if (node->requires_grad) {
            for (const auto& p : parents) node->parents.push_back(p.node());
            node->backward = std::move(backward_fn);
        }
    }
    return Var(std::move(node));
}

void accumulate(const Var& v, const Matrix& g) {
    if (!v.requires_grad()) return;
    auto& buf = v.node()->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) buf.data[i] += g.data[i];
}

// C += A * B, optionally with A or B transposed. Each case keeps the inner
// loop on contiguous rows.
void gemm_acc(const Matrix& a, bool ta, const Matrix& b, bool tb, Matrix& c) {
    const int m = ta ? a.cols : a.rows;
    const int k = ta ? a.rows : a.cols;
    const int n = tb ? b.rows : b.cols;
    double* cd = c.data.data();
    const double* ad_ = a.data.data();
    const double* bd = b.data.data();
    if (tb && !ta) {
        for (int i = 0; i < m; ++i) {
            const double* arow = ad_ + static_cast<std::ptrdiff_t>(i) * k;
            for (int j = 0; j < n; ++j) {
                const double* brow = bd + static_cast<std::ptrdiff_t>(j) * k;
                double acc = 0.0;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                cd[static_cast<std::ptrdiff_t>(i) * n + j] += acc;
            }
        }
        return;
    }
    if (ta && !tb) {
        for (int p = 0; p < k; ++p) {
            const double* arow = ad_ + static_cast<std::ptrdiff_t>(p) * m;
            const double* brow = bd + static_cast<std::ptrdiff_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const double av = arow[i];
                if (av == 0.0) continue;
                double* crow = cd + static_cast<std::ptrdiff_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
    for (int i = 0; i < m; ++i) {
        double* crow = cd + static_cast<std::ptrdiff_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ta ? a(p, i) : a(i, p);
            if (av == 0.0) continue;
            if (!tb) {
                const double* brow = bd + static_cast<std::ptrdiff_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += av * b(j, p);
            }
        }
    }
}

}  // namespace

Matrix Matrix::row_vector(std::span<const double> v) {
    Matrix m(1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), m.data.begin());
    return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.front().size()) throw ConfigError("ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), m.data.begin() + static_cast<std::ptrdiff_t>(r * rows[r].size()));
    }
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

Matrix& Node::grad_buffer() {
    if (grad.size() != value.size()) grad = Matrix(value.rows, value.cols);
    return grad;
}

double Var::scalar() const {
    if (value().size() != 1) throw ConfigError("scalar() on a non-scalar value");
    return value().data[0];
}

const Matrix& Var::grad() const { return node_->grad_buffer(); }

void Var::zero_grad() {
    if (node_->grad.size() == node_->value.size()) std::fill(node_->grad.data.begin(), node_->grad.data.end(), 0.0);
}

Var constant(Matrix m) {
    auto node = std::make_shared<Node>();
    node->value = std::move(m);
    return Var(std::move(node));
}

Var constant_row(std::span<const double> v) { return constant(Matrix::row_vector(v)); }

Var parameter(Matrix m) {
    auto node = std::make_shared<Node>();
    node->value = std::move(m);
    node->requires_grad = true;
    return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
    if (root.value().size() != 1) throw ConfigError("backward() needs a scalar root");
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !p->parents.empty() && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Intermediate gradients start from zero for every sweep.
    for (Node* n : order) n->grad = Matrix(n->value.rows, n->value.cols);
    root.node()->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "matmul");
    Matrix out(a.rows(), b.cols());
    gemm_acc(a.value(), false, b.value(), false, out);
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) gemm_acc(self.grad, false, b.value(), true, a.node()->grad_buffer());
        if (b.requires_grad()) gemm_acc(a.value(), true, self.grad, false, b.node()->grad_buffer());
    });
}

Var transpose(const Var& a) {
    Matrix out(a.cols(), a.rows());
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) out(c, r) = a.at(r, c);
    return make(std::move(out), {a}, [a](Node& self) {
        auto& g = a.node()->grad_buffer();
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) g(r, c) += self.grad(c, r);
    });
}

Var add(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        accumulate(a, self.grad);
        accumulate(b, self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        accumulate(a, self.grad);
        if (b.requires_grad()) {
            auto& g = b.node()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] -= self.grad.data[i];
        }
    });
}

Var add_row(const Var& a, const Var& r) {
    require(r.rows() == 1 && r.cols() == a.cols(), "add_row");
    Matrix out = a.value();
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) += r.at(0, j);
    return make(std::move(out), {a, r}, [a, r](Node& self) {
        accumulate(a, self.grad);
        if (r.requires_grad()) {
            auto& g = r.node()->grad_buffer();
            for (int i = 0; i < self.grad.rows; ++i)
                for (int j = 0; j < self.grad.cols; ++j) g(0, j) += self.grad(i, j);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a.requires_grad()) {
            auto& g = a.node()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * b.value().data[i];
        }
        if (b.requires_grad()) {
            auto& g = b.node()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * a.value().data[i];
        }
    });
}

Var mul_row(const Var& a, const Var& r) {
    require(r.rows() == 1 && r.cols() == a.cols(), "mul_row");
    Matrix out = a.value();
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) *= r.at(0, j);
    return make(std::move(out), {a, r}, [a, r](Node& self) {
        if (a.requires_grad()) {
            auto& g = a.node()->grad_buffer();
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) g(i, j) += self.grad(i, j) * r.at(0, j);
        }
        if (r.requires_grad()) {
            auto& g = r.node()->grad_buffer();
            for (int i = 0; i < self.grad.rows; ++i)
                for (int j = 0; j < self.grad.cols; ++j) g(0, j) += self.grad(i, j) * a.at(i, j);
        }
    });
}

Var scale(const Var& a, double s) {
    Matrix out = a.value();
    for (auto& v : out.data) v *= s;
    return make(std::move(out), {a}, [a, s](Node& self) {
        auto& g = a.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s * self.grad.data[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Matrix out = a.value();
    for (auto& v : out.data) v += s;
    return make(std::move(out), {a}, [a](Node& self) { accumulate(a, self.grad); });
}

Var tanh(const Var& a) {
    Matrix out = a.value();
    for (auto& v : out.data) v = std::tanh(v);
    return make(std::move(out), {a}, [a](Node& self) {
        auto& g = a.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.value.data[i];
            g.data[i] += self.grad.data[i] * (1.0 - y * y);
        }
    });
}

Var gelu(const Var& a) {
    Matrix out = a.value();
    for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
    return make(std::move(out), {a}, [a](Node& self) {
        auto& g = a.node()->grad_buffer();
        const auto& x = a.value().data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
            const double pdf = std::exp(-0.5 * x[i] * x[i]) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
            g.data[i] += self.grad.data[i] * (cdf + x[i] * pdf);
        }
    });
}

Var square(const Var& a) {
    Matrix out = a.value();
    for (auto& v : out.data) v *= v;
    return make(std::move(out), {a}, [a](Node& self) {
        auto& g = a.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += 2.0 * a.value().data[i] * self.grad.data[i];
    });
}

Var concat_cols(const Var& a, const Var& b) {
    require(a.rows() == b.rows(), "concat_cols");
    const int ca = a.cols();
    Matrix out(a.rows(), ca + b.cols());
    for (int i = 0; i < out.rows; ++i) {
        for (int j = 0; j < ca; ++j) out(i, j) = a.at(i, j);
        for (int j = 0; j < b.cols(); ++j) out(i, ca + j) = b.at(i, j);
    }
    return make(std::move(out), {a, b}, [a, b, ca](Node& self) {
        if (a.requires_grad()) {
            auto& g = a.node()->grad_buffer();
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) g(i, j) += self.grad(i, j);
        }
        if (b.requires_grad()) {
            auto& g = b.node()->grad_buffer();
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) g(i, j) += self.grad(i, ca + j);
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ConfigError("concat_rows of nothing");
    const int cols = parts.front().cols();
    int rows = 0;
    for (const auto& p : parts) {
        require(p.cols() == cols, "concat_rows");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    auto dst = out.data.begin();
    for (const auto& p : parts) dst = std::copy(p.value().data.begin(), p.value().data.end(), dst);

    auto node = std::make_shared<Node>();
    node->value = std::move(out);
    if (g_grad_enabled && std::any_of(parts.begin(), parts.end(), [](const Var& p) { return p.requires_grad(); })) {
        node->requires_grad = true;
        std::vector<Var> kept(parts.begin(), parts.end());
        for (const auto& p : kept) node->parents.push_back(p.node());
        node->backward = [kept = std::move(kept)](Node& self) {
            std::size_t offset = 0;
            for (const auto& p : kept) {
                const std::size_t n = p.value().size();
                if (p.requires_grad()) {
                    auto& g = p.node()->grad_buffer();
                    for (std::size_t i = 0; i < n; ++i) g.data[i] += self.grad.data[offset + i];
                }
                offset += n;
            }
        };
    }
    return Var(std::move(node));
}

Var slice_rows(const Var& a, int begin, int end) {
    require(0 <= begin && begin <= end && end <= a.rows(), "slice_rows");
    Matrix out(end - begin, a.cols());
    std::copy(a.value().data.begin() + static_cast<std::ptrdiff_t>(begin) * a.cols(),
              a.value().data.begin() + static_cast<std::ptrdiff_t>(end) * a.cols(), out.data.begin());
    return make(std::move(out), {a}, [a, begin](Node& self) {
        auto& g = a.node()->grad_buffer();
        const std::size_t off = static_cast<std::size_t>(begin) * static_cast<std::size_t>(a.cols());
        for (std::size_t i = 0; i < self.grad.size(); ++i) g.data[off + i] += self.grad.data[i];
    });
}

Var row(const Var& a, int r) { return slice_rows(a, r, r + 1); }

Var gather_rows(const Var& table, std::span<const int> indices) {
    const int cols = table.cols();
    Matrix out(static_cast<int>(indices.size()), cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < table.rows(), "gather_rows");
        for (int j = 0; j < cols; ++j) out(static_cast<int>(i), j) = table.at(indices[i], j);
    }
    std::vector<int> idx(indices.begin(), indices.end());
    return make(std::move(out), {table}, [table, idx = std::move(idx)](Node& self) {
        auto& g = table.node()->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < g.cols; ++j) g(idx[i], j) += self.grad(static_cast<int>(i), j);
    });
}

Var pick(const Var& a, int r, int c) {
    require(0 <= r && r < a.rows() && 0 <= c && c < a.cols(), "pick");
    Matrix out(1, 1, a.at(r, c));
    return make(std::move(out), {a}, [a, r, c](Node& self) { a.node()->grad_buffer()(r, c) += self.grad.data[0]; });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    return make(Matrix(1, 1, s), {a}, [a](Node& self) {
        auto& g = a.node()->grad_buffer();
        for (auto& v : g.data) v += self.grad.data[0];
    });
}

Var sum_rows(const Var& a) {
    Matrix out(1, a.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out(0, j) += a.at(i, j);
    return make(std::move(out), {a}, [a](Node& self) {
        auto& g = a.node()->grad_buffer();
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) g(i, j) += self.grad(0, j);
    });
}

Var mean_rows(const Var& a) {
    require(a.rows() > 0, "mean_rows");
    return scale(sum_rows(a), 1.0 / a.rows());
}

Var detach(const Var& a) { return constant(a.value()); }

Var softmax_rows(const Var& a, const Matrix& mask) {
    require(mask.rows == a.rows() && mask.cols == a.cols(), "softmax_rows");
    Matrix out(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < a.cols(); ++j) mx = std::max(mx, a.at(i, j) + mask(i, j));
        if (!std::isfinite(mx)) throw NumericFault("softmax row has no finite entry");
        double z = 0.0;
        for (int j = 0; j < a.cols(); ++j) {
            const double e = std::isinf(mask(i, j)) ? 0.0 : std::exp(a.at(i, j) + mask(i, j) - mx);
            out(i, j) = e;
            z += e;
        }
        for (int j = 0; j < a.cols(); ++j) out(i, j) /= z;
    }
    return make(std::move(out), {a}, [a](Node& self) {
        auto& g = a.node()->grad_buffer();
        for (int i = 0; i < g.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < g.cols; ++j) dot += self.grad(i, j) * self.value(i, j);
            for (int j = 0; j < g.cols; ++j) g(i, j) += self.value(i, j) * (self.grad(i, j) - dot);
        }
    });
}

Var masked_log_softmax(const Var& logits, std::span<const char> allowed) {
    require(logits.cols() == 1 && static_cast<std::size_t>(logits.rows()) == allowed.size(), "masked_log_softmax");
    const double neg_inf = -std::numeric_limits<double>::infinity();
    double mx = neg_inf;
    for (int i = 0; i < logits.rows(); ++i)
        if (allowed[static_cast<std::size_t>(i)]) mx = std::max(mx, logits.at(i, 0));
    if (mx == neg_inf) throw NumericFault("every action is masked");
    if (!std::isfinite(mx)) throw NumericFault("non-finite logit");
    double z = 0.0;
    for (int i = 0; i < logits.rows(); ++i)
        if (allowed[static_cast<std::size_t>(i)]) z += std::exp(logits.at(i, 0) - mx);
    const double log_z = mx + std::log(z);
    Matrix out(logits.rows(), 1);
    for (int i = 0; i < logits.rows(); ++i)
        out(i, 0) = allowed[static_cast<std::size_t>(i)] ? logits.at(i, 0) - log_z : neg_inf;
    std::vector<char> keep(allowed.begin(), allowed.end());
    return make(std::move(out), {logits}, [logits, keep = std::move(keep)](Node& self) {
        auto& g = logits.node()->grad_buffer();
        double total = 0.0;
        for (int i = 0; i < g.rows; ++i)
            if (keep[static_cast<std::size_t>(i)]) total += self.grad(i, 0);
        for (int i = 0; i < g.rows; ++i)
            if (keep[static_cast<std::size_t>(i)]) g(i, 0) += self.grad(i, 0) - std::exp(self.value(i, 0)) * total;
    });
}

Var channel_matmul(const Var& a, const Var& b, int n) {
    require(a.rows() == n * n && b.rows() == n * n && a.cols() == b.cols(), "channel_matmul");
    const int ch = a.cols();
    Matrix out(n * n, ch);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < n; ++j)
                for (int c = 0; c < ch; ++c) out(i * n + j, c) += a.at(i * n + k, c) * b.at(k * n + j, c);
    return make(std::move(out), {a, b}, [a, b, n, ch](Node& self) {
        // dA[i,k] = sum_j dP[i,j] B[k,j];  dB[k,j] = sum_i A[i,k] dP[i,j]
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k)
                for (int j = 0; j < n; ++j)
                    for (int c = 0; c < ch; ++c) {
                        const double gp = self.grad(i * n + j, c);
                        if (a.requires_grad()) a.node()->grad_buffer()(i * n + k, c) += gp * b.at(k * n + j, c);
                        if (b.requires_grad()) b.node()->grad_buffer()(k * n + j, c) += a.at(i * n + k, c) * gp;
                    }
    });
}

}  // namespace esceme::ad
