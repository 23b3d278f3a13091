#include <catch2/catch_amalgamated.hpp>

#include <derog/rng.hpp>
#include <derog/tensor.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

using namespace derog;
using V = std::vector<double>;

static bool same_bits(double a, double b) {
    return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

TEST_CASE("matmul forward hand examples", "[tensor]") {
    Tape t;
    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor b = Tensor::matrix(2, 1, {1, 1});
    Tensor c = t.matmul(a, b);
    REQUIRE(c.shape == Shape{2, 1});
    REQUIRE((*c.data) == V{3, 7});

    Tensor b2 = Tensor::matrix(2, 1, {5, 6});
    Tensor c2 = t.matmul(a, b2);
    REQUIRE((*c2.data) == V{17, 39});
}

TEST_CASE("sigmoid and row_softmax forward", "[tensor]") {
    Tape t;
    Tensor x = Tensor::matrix(1, 1, {0});
    REQUIRE(t.sigmoid(x).item() == 0.5);

    Tensor z = Tensor::matrix(1, 3, {0, 0, 0});
    Tensor p = t.row_softmax(z);
    for (double v : *p.data) REQUIRE(v == Catch::Approx(1.0 / 3.0).margin(1e-15));

    // rows sum to 1 within 1e-12 on random input
    Rng rng(7);
    std::vector<double> vals(4 * 5);
    for (auto& v : vals) v = rng.uniform(-4.0, 4.0);
    Tensor r = Tensor::matrix(4, 5, vals);
    Tensor q = t.row_softmax(r);
    for (long i = 0; i < 4; ++i) {
        double s = 0;
        for (long j = 0; j < 5; ++j) s += (*q.data)[i * 5 + j];
        REQUIRE(std::abs(s - 1.0) < 1e-12);
        for (long j = 0; j < 5; ++j) REQUIRE((*q.data)[i * 5 + j] >= 0.0);
    }
}

TEST_CASE("backward of sum_all(x*x)", "[tensor]") {
    Tape t;
    Tensor x = Tensor::row({1, 2}, true);
    Tensor loss = t.sum_all(t.mul(x, x));
    GradMap g = t.backward(loss);
    REQUIRE(g.get(x) == V{2, 4});
}

TEST_CASE("grad_reverse forward identity and backward negation", "[tensor]") {
    {
        Tape t;
        Tensor x = Tensor::row({1, 2});
        Tensor y = t.grad_reverse(x, 1.0);
        REQUIRE((*y.data) == V{1, 2});
    }
    {
        Tape t;
        Tensor x = Tensor::row({5, 7}, true);
        Tensor loss = t.sum_all(t.grad_reverse(x, 1.0));
        GradMap g = t.backward(loss);
        REQUIRE(g.get(x) == V{-1, -1});
    }
    {
        // upstream gradient [4] via a constant weight, lambda = 0.5 -> [-2]
        Tape t;
        Tensor x = Tensor::row({3}, true);
        Tensor w = Tensor::row({4});
        Tensor loss = t.sum_all(t.mul(t.grad_reverse(x, 0.5), w));
        GradMap g = t.backward(loss);
        REQUIRE(g.get(x) == V{-2});
    }
}

TEST_CASE("grad_reverse backward is bitwise -lambda * upstream", "[tensor]") {
    Rng rng(42);
    for (double lambda : {0.0, 0.5, 1.0}) {
        std::vector<double> up(6);
        for (auto& v : up) v = rng.uniform(-3.0, 3.0);
        Tape t;
        Tensor x = Tensor::row({1, 1, 1, 1, 1, 1}, true);
        Tensor w = Tensor::row(up);
        Tensor loss = t.sum_all(t.mul(t.grad_reverse(x, lambda), w));
        GradMap g = t.backward(loss);
        const V& gx = g.get(x);
        for (int i = 0; i < 6; ++i) REQUIRE(same_bits(gx[i], -lambda * up[i]));
    }
}

TEST_CASE("gradients accumulate across reuse", "[tensor]") {
    Tape t;
    Tensor x = Tensor::row({3, 5}, true);
    Tensor loss = t.sum_all(t.add(x, x));
    GradMap g = t.backward(loss);
    REQUIRE(g.get(x) == V{2, 2});

    Tape t2;
    Tensor y = Tensor::row({2}, true);
    // y used in two separate branches: y*y + 3*y -> d/dy = 2y + 3 = 7
    Tensor loss2 = t2.add(t2.sum_all(t2.mul(y, y)), t2.sum_all(t2.scalar_mul(y, 3.0)));
    GradMap g2 = t2.backward(loss2);
    REQUIRE(g2.get(y) == V{7});
}

TEST_CASE("mean_all(sigmoid(x)) gradient at 0 is 0.25", "[tensor]") {
    Tape t;
    Tensor x = Tensor::row({0}, true);
    Tensor loss = t.mean_all(t.sigmoid(x));
    GradMap g = t.backward(loss);
    REQUIRE(g.get(x)[0] == Catch::Approx(0.25).margin(1e-12));

    Tensor x2 = Tensor::row({0}, true);
    double err2 = finite_difference_gradcheck(
        [&](Tape& tp) { return tp.mean_all(tp.sigmoid(x2)); }, {x2}, 1e-6);
    REQUIRE(err2 < 1e-6);
}

TEST_CASE("gradcheck x^2 at x=3 and constant function", "[tensor]") {
    Tensor x = Tensor::row({3}, true);
    double err = finite_difference_gradcheck(
        [&](Tape& t) { return t.sum_all(t.mul(x, x)); }, {x}, 1e-6);
    REQUIRE(err < 1e-8);

    Tensor c = Tensor::row({1, 2, 3});
    double err_const = finite_difference_gradcheck(
        [&](Tape& t) { return t.sum_all(c); }, {x}, 1e-6);
    REQUIRE(err_const == 0.0);
}

TEST_CASE("relu forward and backward mask", "[tensor]") {
    Tape t;
    Tensor x = Tensor::row({-1, 0, 2}, true);
    Tensor y = t.relu(x);
    REQUIRE((*y.data) == V{0, 0, 2});
    GradMap g = t.backward(t.sum_all(y));
    REQUIRE(g.get(x) == V{0, 0, 1});
}

TEST_CASE("log clamps input at 1e-12", "[tensor]") {
    Tape t;
    Tensor x = Tensor::row({0.0, 1.0}, true);
    Tensor y = t.log(x);
    REQUIRE((*y.data)[0] == Catch::Approx(std::log(1e-12)).margin(1e-12));
    REQUIRE((*y.data)[1] == 0.0);
    GradMap g = t.backward(t.sum_all(y));
    REQUIRE(g.get(x)[0] == 0.0);  // clamped region has zero slope
    REQUIRE(g.get(x)[1] == 1.0);
}

TEST_CASE("row_softmax rows absorb constant shifts in gradient", "[tensor]") {
    // d(sum of softmax row)/dx = 0 since each row always sums to 1
    Tape t;
    Tensor x = Tensor::matrix(2, 3, {0.3, -1.2, 0.7, 2.0, 0.1, -0.5}, true);
    GradMap g = t.backward(t.sum_all(t.row_softmax(x)));
    for (double v : g.get(x)) REQUIRE(std::abs(v) < 1e-14);
}

TEST_CASE("per-primitive gradcheck on random small inputs", "[tensor]") {
    Rng rng(123);
    auto rand_mat = [&](long r, long c, double lo, double hi) {
        std::vector<double> v(r * c);
        for (auto& e : v) e = rng.uniform(lo, hi);
        return Tensor::matrix(r, c, v, true);
    };

    SECTION("matmul") {
        Tensor a = rand_mat(3, 4, -1, 1), b = rand_mat(4, 2, -1, 1);
        double err = finite_difference_gradcheck(
            [&](Tape& t) { return t.sum_all(t.mul(t.matmul(a, b), t.matmul(a, b))); },
            {a, b}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("add sub mul with row broadcast") {
        Tensor a = rand_mat(3, 4, -1, 1), b = rand_mat(3, 4, -1, 1);
        Tensor bias = rand_mat(1, 4, -1, 1);
        double err = finite_difference_gradcheck(
            [&](Tape& t) {
                Tensor u = t.add(a, bias);
                Tensor v = t.sub(u, b);
                return t.sum_all(t.mul(v, v));
            },
            {a, b, bias}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("scalar_mul constant and tensor scalar") {
        Tensor a = rand_mat(2, 3, -1, 1);
        Tensor s = Tensor::scalar(0.7, true);
        double err = finite_difference_gradcheck(
            [&](Tape& t) {
                Tensor u = t.scalar_mul(a, -1.5);
                Tensor v = t.scalar_mul(u, s);
                return t.sum_all(t.mul(v, v));
            },
            {a, s}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("rowwise_concat") {
        Tensor a = rand_mat(3, 2, -1, 1), b = rand_mat(3, 3, -1, 1), c = rand_mat(3, 1, -1, 1);
        Tensor w = rand_mat(3, 6, -1, 1);
        double err = finite_difference_gradcheck(
            [&](Tape& t) { return t.sum_all(t.mul(t.concat({a, b, c}), w)); },
            {a, b, c}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("relu") {
        Tensor a = rand_mat(4, 3, -1, 1);  // values away from 0 kink w.h.p.
        double err = finite_difference_gradcheck(
            [&](Tape& t) { return t.sum_all(t.mul(t.relu(a), t.relu(a))); }, {a}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("sigmoid exp log") {
        Tensor a = rand_mat(3, 3, 0.1, 2.0);
        double err = finite_difference_gradcheck(
            [&](Tape& t) { return t.sum_all(t.log(t.add(t.exp(t.sigmoid(a)), a))); },
            {a}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("row_softmax") {
        Tensor a = rand_mat(3, 4, -2, 2);
        Tensor w = rand_mat(3, 4, -1, 1);
        double err = finite_difference_gradcheck(
            [&](Tape& t) { return t.sum_all(t.mul(t.row_softmax(a), w)); }, {a}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("mean_all sum_rows l1_norm_rows") {
        Tensor a = rand_mat(4, 3, 0.2, 2.0);  // positive: keep |.| differentiable
        Tensor w = rand_mat(4, 1, -1, 1);
        double err = finite_difference_gradcheck(
            [&](Tape& t) {
                Tensor u = t.sum_rows(a);
                Tensor v = t.l1_norm_rows(a);
                return t.mean_all(t.mul(t.add(u, v), w));
            },
            {a}, 1e-6);
        REQUIRE(err < 1e-6);
    }
    SECTION("index_rows scatter_sum_rows grad_reverse") {
        Tensor a = rand_mat(4, 3, -1, 1);
        Tensor w = rand_mat(6, 3, -1, 1);
        std::vector<long> idx = {0, 2, 2, 1, 3, 0};
        std::vector<long> seg = {0, 0, 1, 1, 2, 2};
        // lambda = -1 is the one value where the GRL's backward (-lambda * g)
        // agrees with finite differences of its identity forward, so it can
        // ride along in a gradcheck; the sign flip itself has a bitwise test.
        double err = finite_difference_gradcheck(
            [&](Tape& t) {
                Tensor u = t.index_rows(a, idx);           // 6x3
                Tensor v = t.scatter_sum_rows(t.mul(u, w), seg, 3);
                return t.sum_all(t.mul(t.grad_reverse(v, -1.0), v));
            },
            {a}, 1e-6);
        REQUIRE(err < 1e-6);
    }
}

TEST_CASE("index and scatter forward semantics", "[tensor]") {
    Tape t;
    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor picked = t.index_rows(a, {1, 0, 1});
    REQUIRE((*picked.data) == V{3, 4, 1, 2, 3, 4});

    Tensor b = Tensor::matrix(3, 2, {1, 1, 2, 2, 3, 3});
    Tensor summed = t.scatter_sum_rows(b, {0, 0, 1}, 2);
    REQUIRE((*summed.data) == V{3, 3, 3, 3});
}

TEST_CASE("scatter mean equals naive per-segment mean", "[tensor]") {
    Rng rng(9);
    long v = 7, d = 3;
    std::vector<double> vals(v * d);
    for (auto& e : vals) e = rng.uniform(-2, 2);
    std::vector<long> seg = {0, 0, 1, 1, 1, 2, 2};
    Tape t;
    Tensor x = Tensor::matrix(v, d, vals);
    Tensor sums = t.scatter_sum_rows(x, seg, 3);
    std::vector<double> counts = {2, 2, 3, 3, 3, 3, 3};  // per segment: 2,3,2
    Tensor inv = Tensor::matrix(3, d, {0.5, 0.5, 0.5, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.5, 0.5, 0.5});
    Tensor mean = t.mul(sums, inv);
    for (long s = 0; s < 3; ++s)
        for (long j = 0; j < d; ++j) {
            double acc = 0;
            long n = 0;
            for (long i = 0; i < v; ++i)
                if (seg[i] == s) { acc += vals[i * d + j]; ++n; }
            REQUIRE(std::abs((*mean.data)[s * d + j] - acc / n) < 1e-12);
        }
}

TEST_CASE("shape and usage errors", "[tensor]") {
    Tape t;
    Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::matrix(2, 2, {1, 2, 3, 4});
    REQUIRE_THROWS_MATCHES(t.matmul(a, b), shape_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("matmul") &&
                               Catch::Matchers::ContainsSubstring("[2,3]") &&
                               Catch::Matchers::ContainsSubstring("[2,2]")));

    Tensor x = Tensor::row({1, 2}, true);
    Tensor y = t.mul(x, x);
    REQUIRE_THROWS_AS(t.backward(y), shape_error);  // non-scalar loss

    Tensor loss = t.sum_all(y);
    t.backward(loss);
    REQUIRE_THROWS_AS(t.backward(loss), usage_error);  // consumed tape

    Tape t2;
    Tensor z = Tensor::row({1}, true);
    Tensor l2 = t2.sum_all(z);
    REQUIRE_THROWS_AS(t.backward(l2), usage_error);  // loss from another tape

    REQUIRE_THROWS_MATCHES(t2.apply(static_cast<Op>(999), {z}, {}), config_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("999")));
}

TEST_CASE("tensors from a dead or foreign tape act as constants", "[tensor]") {
    Tensor latent;
    {
        Tape scratch(false);  // non-recording
        Tensor p = Tensor::row({1, 2}, true);
        latent = scratch.mul(p, p);
        REQUIRE(latent.requires_grad == false);
    }
    Tape t;
    Tensor w = Tensor::row({3, 4}, true);
    GradMap g = t.backward(t.sum_all(t.mul(latent, w)));
    REQUIRE(g.get(w) == V{1, 4});
    REQUIRE_FALSE(g.contains(latent));

    Tensor d = Tensor::row({5}, true).detach();
    REQUIRE(d.requires_grad == false);
    REQUIRE(d.node == -1);
}

TEST_CASE("non-scalar gradcheck target and non-finite loss are rejected", "[tensor]") {
    Tensor x = Tensor::row({1, 2}, true);
    REQUIRE_THROWS_AS(finite_difference_gradcheck(
                          [&](Tape& t) { return t.mul(x, x); }, {x}, 1e-6),
                      shape_error);
    REQUIRE_THROWS_AS(finite_difference_gradcheck(
                          [&](Tape& t) {
                              Tensor inf = Tensor::row({1e308});
                              return t.sum_all(t.mul(t.add(inf, inf), t.add(inf, inf)));
                          },
                          {x}, 1e-6),
                      numeric_error);
}

TEST_CASE("rng determinism and distribution sanity", "[tensor]") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next() == b.next());

    Rng c(1234), d(999);
    bool differs = false;
    for (int i = 0; i < 10; ++i) differs |= (c.next() != d.next());
    REQUIRE(differs);

    Rng r(77);
    for (int i = 0; i < 1000; ++i) {
        double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        long k = r.below(7);
        REQUIRE(k >= 0);
        REQUIRE(k < 7);
        REQUIRE(std::isfinite(r.normal()));
    }

    // state round-trip
    Rng s(55);
    s.next();
    auto st = s.state();
    Rng s2 = Rng::from_state(st);
    for (int i = 0; i < 16; ++i) REQUIRE(s.next() == s2.next());

    // Fisher-Yates shuffle is a permutation and seed-stable
    std::vector<long> v1{0, 1, 2, 3, 4, 5, 6, 7}, v2 = v1;
    Rng p1(5), p2(5);
    p1.shuffle(v1);
    p2.shuffle(v2);
    REQUIRE(v1 == v2);
    REQUIRE(std::set<long>(v1.begin(), v1.end()).size() == 8);
}
