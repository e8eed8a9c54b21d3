#include "esceme/autodiff.hpp"
#include "esceme/errors.hpp"
#include "esceme/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

using namespace esceme;
using namespace esceme::ad;

namespace {

Matrix random_matrix(Rng& rng, int r, int c) {
    Matrix m(r, c);
    for (auto& x : m.data) x = rng.uniform(-1.0, 1.0);
    return m;
}

// Central differences against backward() for every entry of every input.
void check_gradients(std::vector<Var> inputs, const std::function<Var(const std::vector<Var>&)>& f, double tol = 1e-7) {
    for (auto& v : inputs) v.zero_grad();
    backward(f(inputs));
    const double eps = 1e-6;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& data = inputs[i].mutable_value().data;
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double keep = data[j];
            double plus = 0.0, minus = 0.0;
            {
                NoGradGuard guard;
                data[j] = keep + eps;
                plus = f(inputs).scalar();
                data[j] = keep - eps;
                minus = f(inputs).scalar();
            }
            data[j] = keep;
            const double numeric = (plus - minus) / (2 * eps);
            INFO("input " << i << " entry " << j);
            CHECK(inputs[i].grad().data[j] == doctest::Approx(numeric).epsilon(tol).scale(1.0));
        }
    }
}

// Weighted sum so every output entry carries a distinct gradient.
Var probe(const Var& x) {
    Matrix w(x.rows(), x.cols());
    for (std::size_t i = 0; i < w.size(); ++i) w.data[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
    return sum(mul(x, constant(w)));
}

}  // namespace

TEST_CASE("gradient of x squared at 3 is 6") {
    Var x = parameter(Matrix(1, 1, 3.0));
    backward(sum(square(x)));
    CHECK(x.grad().data[0] == doctest::Approx(6.0));
}

TEST_CASE("zero loss gives zero gradients") {
    Var x = parameter(Matrix(2, 2, 1.0));
    backward(scale(sum(x), 0.0));
    for (double g : x.grad().data) CHECK(g == 0.0);
}

TEST_CASE("leaf gradients accumulate across backward passes") {
    Var x = parameter(Matrix(1, 1, 2.0));
    backward(sum(scale(x, 3.0)));
    backward(sum(scale(x, 3.0)));
    CHECK(x.grad().data[0] == doctest::Approx(6.0));
    x.zero_grad();
    CHECK(x.grad().data[0] == 0.0);
}

TEST_CASE("shared subexpressions receive summed gradients") {
    Var x = parameter(Matrix(1, 1, 1.5));
    const Var y = tanh(x);
    backward(sum(mul(y, y)));
    const double t = std::tanh(1.5);
    CHECK(x.grad().data[0] == doctest::Approx(2 * t * (1 - t * t)));
}

TEST_CASE("elementwise and structural ops match finite differences") {
    Rng rng(1);
    auto a = parameter(random_matrix(rng, 3, 4));
    auto b = parameter(random_matrix(rng, 3, 4));
    auto r = parameter(random_matrix(rng, 1, 4));
    check_gradients({a, b}, [](const auto& v) { return probe(add(v[0], v[1])); });
    check_gradients({a, b}, [](const auto& v) { return probe(sub(v[0], v[1])); });
    check_gradients({a, b}, [](const auto& v) { return probe(mul(v[0], v[1])); });
    check_gradients({a, r}, [](const auto& v) { return probe(add_row(v[0], v[1])); });
    check_gradients({a, r}, [](const auto& v) { return probe(mul_row(v[0], v[1])); });
    check_gradients({a}, [](const auto& v) { return probe(scale(add_scalar(v[0], 0.5), -1.7)); });
    check_gradients({a}, [](const auto& v) { return probe(tanh(v[0])); });
    check_gradients({a}, [](const auto& v) { return probe(square(v[0])); });
    check_gradients({a}, [](const auto& v) { return probe(gelu(scale(v[0], 2.0))); });
    check_gradients({a}, [](const auto& v) { return probe(transpose(v[0])); });
    check_gradients({a, b}, [](const auto& v) { return probe(concat_cols(v[0], v[1])); });
    check_gradients({a, b}, [](const auto& v) {
        const std::vector<Var> parts{v[0], v[1], v[0]};
        return probe(concat_rows(parts));
    });
    check_gradients({a}, [](const auto& v) { return probe(slice_rows(v[0], 1, 3)); });
    check_gradients({a}, [](const auto& v) { return probe(row(v[0], 2)); });
    check_gradients({a}, [](const auto& v) {
        const std::vector<int> idx{2, 0, 2};
        return probe(gather_rows(v[0], idx));
    });
    check_gradients({a}, [](const auto& v) { return probe(pick(v[0], 1, 3)); });
    check_gradients({a}, [](const auto& v) { return probe(sum_rows(v[0])); });
    check_gradients({a}, [](const auto& v) { return probe(mean_rows(v[0])); });
}

TEST_CASE("matmul and softmax match finite differences") {
    Rng rng(2);
    auto a = parameter(random_matrix(rng, 3, 5));
    auto b = parameter(random_matrix(rng, 5, 2));
    check_gradients({a, b}, [](const auto& v) { return probe(matmul(v[0], v[1])); });
    check_gradients({a, b}, [](const auto& v) { return probe(matmul(transpose(v[1]), transpose(v[0]))); });
    Matrix mask(3, 5);
    mask(0, 1) = -std::numeric_limits<double>::infinity();
    mask(2, 4) = -std::numeric_limits<double>::infinity();
    check_gradients({a}, [&](const auto& v) { return probe(softmax_rows(v[0], mask)); });
}

TEST_CASE("channel matmul matches finite differences and a hand product") {
    Rng rng(3);
    const int n = 3, c = 2;
    auto a = parameter(random_matrix(rng, n * n, c));
    auto b = parameter(random_matrix(rng, n * n, c));
    check_gradients({a, b}, [&](const auto& v) { return probe(channel_matmul(v[0], v[1], n)); });
    const auto out = channel_matmul(a, b, n);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int k = 0; k < n; ++k) s += a.at(i * n + k, ch) * b.at(k * n + j, ch);
                CHECK(out.at(i * n + j, ch) == doctest::Approx(s).epsilon(1e-14));
            }
}

TEST_CASE("gelu values") {
    Matrix x(1, 3);
    x.data = {0.0, 1.0, -2.0};
    const auto y = gelu(constant(x));
    CHECK(y.at(0, 0) == 0.0);
    CHECK(y.at(0, 1) == doctest::Approx(0.8413447460685429).epsilon(1e-14));
    CHECK(y.at(0, 2) == doctest::Approx(-2.0 * 0.022750131948179195).epsilon(1e-14));
}

TEST_CASE("detach blocks gradient flow") {
    Var x = parameter(Matrix(1, 1, 2.0));
    backward(sum(add(mul(detach(x), x), detach(x))));
    CHECK(x.grad().data[0] == doctest::Approx(2.0));
}

TEST_CASE("softmax of [1, 2, 0]") {
    Matrix logits(3, 1);
    logits.data = {1.0, 2.0, 0.0};
    const std::vector<char> allowed{1, 1, 1};
    const auto lp = masked_log_softmax(constant(logits), allowed);
    CHECK(std::exp(lp.at(0, 0)) == doctest::Approx(0.24473).epsilon(1e-5));
    CHECK(std::exp(lp.at(1, 0)) == doctest::Approx(0.66524).epsilon(1e-5));
    CHECK(std::exp(lp.at(2, 0)) == doctest::Approx(0.09003).epsilon(1e-5));
}

TEST_CASE("masked log softmax excludes masked rows") {
    Rng rng(4);
    auto x = parameter(random_matrix(rng, 4, 1));
    const std::vector<char> allowed{1, 0, 1, 1};
    const auto lp = masked_log_softmax(x, allowed);
    CHECK(lp.at(1, 0) == -std::numeric_limits<double>::infinity());
    double total = 0.0;
    for (int i = 0; i < 4; ++i)
        if (allowed[static_cast<std::size_t>(i)]) total += std::exp(lp.at(i, 0));
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    backward(pick(lp, 2, 0));
    CHECK(x.grad().data[1] == 0.0);
    check_gradients({x}, [&](const auto& v) { return add(pick(masked_log_softmax(v[0], allowed), 0, 0),
                                                         scale(pick(masked_log_softmax(v[0], allowed), 3, 0), 0.4)); });
    const std::vector<char> none{0, 0, 0, 0};
    CHECK_THROWS_AS(masked_log_softmax(x, none), NumericFault);
}

TEST_CASE("no-grad mode records nothing") {
    Var x = parameter(Matrix(1, 1, 1.0));
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    const Var y = scale(x, 2.0);
    CHECK(y.node()->parents.empty());
    CHECK_FALSE(y.requires_grad());
}
