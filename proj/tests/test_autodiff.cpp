#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "support/gradcheck.hpp"
#include "terlab/autodiff.hpp"
#include "terlab/error.hpp"
#include "terlab/rng.hpp"

using namespace terlab;
using ad::Tape;
using ad::Var;
using testing::grad_check;
using testing::random_tensor;

TEST_CASE("matmul identity and hand-checked product") {
    Tape tape;
    auto a = tape.leaf(Tensor2D::from_rows({{1.5, -2.0}, {0.25, 4.0}}));
    auto eye = tape.leaf(Tensor2D::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
    auto prod = tape.matmul(eye, a);
    CHECK(tape.value(prod).vec() == tape.value(a).vec());

    auto b = tape.leaf(Tensor2D::from_rows({{1, 2}, {3, 4}}));
    auto c = tape.leaf(Tensor2D::from_rows({{0}, {1}}));
    auto bc = tape.matmul(b, c);
    CHECK(tape.value(bc).at(0, 0) == 2.0);
    CHECK(tape.value(bc).at(1, 0) == 4.0);
}

TEST_CASE("matmul shape error names both shapes") {
    Tape tape;
    auto a = tape.leaf(Tensor2D(3, 4));
    auto b = tape.leaf(Tensor2D(2, 5));
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("3x4"), ShapeError);
    try {
        tape.matmul(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("2x5") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(101);
    for (int seed = 0; seed < 5; ++seed) {
        auto A = random_tensor(rng, 3, 4);
        auto B = random_tensor(rng, 4, 2);
        auto res = grad_check({A, B}, [](Tape& t, const std::vector<Var>& in) {
            return t.sum_all(t.matmul(in[0], in[1]));
        });
        CHECK(res.max_rel_err < 1e-6);
        CHECK(res.checked == 20);
    }
}

TEST_CASE("softmax rows: symmetry, shift invariance, oracle") {
    Tape tape;
    auto c = tape.leaf(Tensor2D::from_rows({{3.7, 3.7, 3.7, 3.7}}));
    auto p = tape.softmax_rows(c);
    for (std::size_t j = 0; j < 4; ++j) CHECK(tape.value(p).at(0, j) == 0.25);

    Rng rng(5);
    auto x = random_tensor(rng, 1, 8);
    Tensor2D shifted = x;
    for (auto& v : shifted.vec()) v += 13.25;
    auto p1 = tape.softmax_rows(tape.leaf(x));
    auto p2 = tape.softmax_rows(tape.leaf(shifted));
    for (std::size_t j = 0; j < 8; ++j)
        CHECK(tape.value(p1).at(0, j) == doctest::Approx(tape.value(p2).at(0, j)).epsilon(1e-12));

    // scalar exp-normalize oracle
    auto spike = tape.softmax_rows(tape.leaf(Tensor2D::from_rows({{10, 0, 0, 0}})));
    const double z = std::exp(10.0) + 3.0;
    CHECK(tape.value(spike).at(0, 0) == doctest::Approx(std::exp(10.0) / z).epsilon(1e-14));
    CHECK(tape.value(spike).at(0, 1) == doctest::Approx(1.0 / z).epsilon(1e-14));
    CHECK(tape.value(spike).at(0, 0) == doctest::Approx(0.999864).epsilon(1e-5));
    CHECK(tape.value(spike).at(0, 1) == doctest::Approx(4.5395e-5).epsilon(1e-3));
}

TEST_CASE("softmax rows sum to one and stay positive") {
    Rng rng(42);
    Tape tape;
    for (int i = 0; i < 50; ++i) {
        auto x = random_tensor(rng, 3, 16, -40.0, 40.0);
        auto p = tape.softmax_rows(tape.leaf(x));
        for (std::size_t t = 0; t < 3; ++t) {
            double s = 0.0;
            for (std::size_t j = 0; j < 16; ++j) {
                const double v = tape.value(p).at(t, j);
                CHECK(v > 0.0);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("softmax gradient") {
    Rng rng(7);
    auto x = random_tensor(rng, 2, 6);
    auto w = random_tensor(rng, 2, 6); // random projection so the loss mixes entries
    auto res = grad_check({x}, [&](Tape& t, const std::vector<Var>& in) {
        return t.sum_all(t.mul(t.softmax_rows(in[0]), t.leaf(w)));
    });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layer_norm constant row collapses to bias") {
    Tape tape;
    auto x = tape.leaf(Tensor2D::from_rows({{2.5, 2.5, 2.5, 2.5}}));
    auto gain = tape.leaf(Tensor2D::full(1, 4, 1.0));
    auto bias = tape.leaf(Tensor2D(1, 4));
    auto y = tape.layer_norm(x, gain, bias, 1e-5);
    for (std::size_t j = 0; j < 4; ++j) CHECK(tape.value(y).at(0, j) == 0.0);
}

TEST_CASE("layer_norm on an already-normalized row with tiny eps") {
    Tape tape;
    auto x = tape.leaf(Tensor2D::from_rows({{1.0, -1.0}}));
    auto gain = tape.leaf(Tensor2D::full(1, 2, 1.0));
    auto bias = tape.leaf(Tensor2D(1, 2));
    auto y = tape.layer_norm(x, gain, bias, 1e-14);
    CHECK(tape.value(y).at(0, 0) == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(tape.value(y).at(0, 1) == doctest::Approx(-1.0).epsilon(1e-7));
}

TEST_CASE("layer_norm rejects mismatched gain length") {
    Tape tape;
    auto x = tape.leaf(Tensor2D(2, 8));
    auto gain = tape.leaf(Tensor2D(1, 4));
    auto bias = tape.leaf(Tensor2D(1, 8));
    CHECK_THROWS_AS(tape.layer_norm(x, gain, bias, 1e-5), ShapeError);
}

TEST_CASE("layer_norm gradient (input, gain, bias)") {
    Rng rng(23);
    for (int seed = 0; seed < 5; ++seed) {
        auto x = random_tensor(rng, 2, 8);
        auto gain = random_tensor(rng, 1, 8, 0.5, 1.5);
        auto bias = random_tensor(rng, 1, 8, -0.5, 0.5);
        auto w = random_tensor(rng, 2, 8);
        auto res = grad_check({x, gain, bias}, [&](Tape& t, const std::vector<Var>& in) {
            return t.sum_all(t.mul(t.layer_norm(in[0], in[1], in[2], 1e-5), t.leaf(w)));
        });
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("backward of sum is all ones; zero-scaled loss zeroes every gradient") {
    Tape tape;
    auto x = tape.leaf(Tensor2D::from_rows({{1, 2}, {3, 4}}), true);
    auto loss = tape.sum_all(x);
    tape.backward(loss);
    for (double v : tape.grad(x).vec()) CHECK(v == 1.0);

    Tape tape2;
    auto x2 = tape2.leaf(Tensor2D::from_rows({{1, 2}, {3, 4}}), true);
    auto loss2 = tape2.scale(tape2.sum_all(tape2.gelu(x2)), 0.0);
    tape2.backward(loss2);
    for (double v : tape2.grad(x2).vec()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar roots") {
    Tape tape;
    auto x = tape.leaf(Tensor2D(2, 2), true);
    CHECK_THROWS_AS(tape.backward(x), UsageError);
}

TEST_CASE("mixing tapes is rejected") {
    Tape tape1, tape2;
    auto a = tape1.leaf(Tensor2D(2, 2));
    auto b = tape2.leaf(Tensor2D(2, 2));
    CHECK_THROWS_AS(tape1.add(a, b), UsageError);
}

TEST_CASE("determinism: identical inputs give bit-identical forward and backward") {
    auto run = [] {
        Rng rng(77);
        Tape tape;
        auto x = tape.leaf(random_tensor(rng, 4, 8), true);
        auto w = tape.leaf(random_tensor(rng, 8, 8), true);
        auto y = tape.gelu(tape.matmul(x, w));
        auto loss = tape.mean_all(tape.mul(y, y));
        tape.backward(loss);
        std::vector<double> out = tape.value(loss).vec();
        auto gx = tape.grad(x).vec();
        out.insert(out.end(), gx.begin(), gx.end());
        auto gw = tape.grad(w).vec();
        out.insert(out.end(), gw.begin(), gw.end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("elementwise, broadcast, reduction and shaping ops gradcheck") {
    Rng rng(301);
    auto x = random_tensor(rng, 3, 5);
    auto y = random_tensor(rng, 3, 5);
    auto r = random_tensor(rng, 1, 5);

    auto res = grad_check({x, y, r}, [](Tape& t, const std::vector<Var>& in) {
        auto a = t.add_row(t.mul(in[0], in[1]), in[2]);
        auto b = t.sub(a, t.scale(in[0], 0.3));
        auto c = t.gelu(b);
        auto d = t.row_mean(c);
        return t.mean_all(t.mul(d, d));
    });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("concat and slice gradcheck") {
    Rng rng(33);
    auto a = random_tensor(rng, 2, 4);
    auto b = random_tensor(rng, 3, 4);
    auto c = random_tensor(rng, 5, 2);
    auto res = grad_check({a, b, c}, [](Tape& t, const std::vector<Var>& in) {
        std::vector<Var> rows = {in[0], in[1]};
        auto cat = t.concat_rows(rows);               // 5x4
        std::vector<Var> cols = {cat, in[2]};
        auto wide = t.concat_cols(cols);              // 5x6
        auto sl = t.slice_rows(wide, 1, 4);           // 3x6
        auto sc = t.slice_cols(sl, 2, 6);             // 3x4
        return t.sum_all(t.mul(sc, sc));
    });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("transpose, diagonal, logsumexp, l2-normalize gradcheck") {
    Rng rng(55);
    auto a = random_tensor(rng, 4, 4);
    auto res = grad_check({a}, [](Tape& t, const std::vector<Var>& in) {
        auto sym = t.matmul(in[0], t.transpose(in[0]));
        auto lse = t.logsumexp_rows(sym);
        auto d = t.diagonal(sym);
        auto n = t.l2_normalize_rows(in[0]);
        auto term = t.add(t.sum_all(lse), t.sum_all(d));
        return t.add(term, t.sum_all(t.mul(n, n)));
    });
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("l2_normalize_rows reports the zero-norm row") {
    Tape tape;
    auto x = tape.leaf(Tensor2D::from_rows({{1.0, 0.0}, {0.0, 0.0}}));
    CHECK_THROWS_WITH_AS(tape.l2_normalize_rows(x), doctest::Contains("row 1"), NumericError);
}

TEST_CASE("sigmoid values and gradient") {
    Tape tape;
    auto x = tape.leaf(Tensor2D::from_rows({{0.0, 1.0, -1.0, 30.0, -30.0}}));
    auto s = tape.sigmoid(x);
    CHECK(tape.value(s).at(0, 0) == 0.5);
    CHECK(tape.value(s).at(0, 1) == doctest::Approx(0.7310585786300049).epsilon(1e-14));
    CHECK(tape.value(s).at(0, 2) == doctest::Approx(0.2689414213699951).epsilon(1e-14));

    Rng rng(9);
    auto y = random_tensor(rng, 2, 5);
    auto res = grad_check({y}, [](Tape& t, const std::vector<Var>& in) {
        return t.sum_all(t.mul(t.sigmoid(in[0]), in[0]));
    });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("gated_residual is a bitwise identity at gate zero but still trains the gate") {
    Rng rng(13);
    auto f = random_tensor(rng, 3, 4);
    auto u = random_tensor(rng, 3, 4);
    Tape tape;
    auto fv = tape.leaf(f, true);
    auto gate = tape.leaf(Tensor2D(1, 1), true); // 0
    auto uv = tape.leaf(u, true);
    auto out = tape.gated_residual(fv, gate, uv);
    CHECK(tape.value(out).vec() == f.vec()); // bitwise

    tape.backward(tape.sum_all(out));
    double expected_gate_grad = 0.0;
    for (double v : u.vec()) expected_gate_grad += v;
    CHECK(tape.grad(gate).at(0, 0) == doctest::Approx(expected_gate_grad).epsilon(1e-12));
    for (double v : tape.grad(uv).vec()) CHECK(v == 0.0); // chain rule: gate is 0
    for (double v : tape.grad(fv).vec()) CHECK(v == 1.0);
}

TEST_CASE("gated_residual gradcheck with open gate") {
    Rng rng(17);
    auto f = random_tensor(rng, 3, 4);
    auto u = random_tensor(rng, 3, 4);
    Tensor2D gate(1, 1);
    gate.at(0, 0) = 0.37;
    auto res = grad_check({f, gate, u}, [](Tape& t, const std::vector<Var>& in) {
        auto out = t.gated_residual(in[0], in[1], in[2]);
        return t.sum_all(t.mul(out, out));
    });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("row_entropy gradcheck") {
    Rng rng(21);
    auto x = random_tensor(rng, 3, 6);
    auto res = grad_check({x}, [](Tape& t, const std::vector<Var>& in) {
        return t.mean_all(t.row_entropy(in[0]));
    });
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("cross-entropy and balanced-bce gradcheck") {
    Rng rng(29);
    auto logits = random_tensor(rng, 1, 5);
    auto res = grad_check({logits}, [](Tape& t, const std::vector<Var>& in) {
        return t.cross_entropy_logits(in[0], 3);
    });
    CHECK(res.max_rel_err < 1e-6);

    auto raw = random_tensor(rng, 3, 4, -2.0, 2.0);
    std::vector<std::pair<std::size_t, std::size_t>> pos = {{0, 1}, {2, 3}};
    auto res2 = grad_check({raw}, [&](Tape& t, const std::vector<Var>& in) {
        return t.balanced_bce(t.sigmoid(in[0]), pos);
    });
    CHECK(res2.max_rel_err < 1e-6);
}

TEST_CASE("gradient property check across core ops and seeds") {
    // every differentiable op appears in at least one composite graph; five seeds
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed * 1009);
        auto x = random_tensor(rng, 3, 8);
        auto w = random_tensor(rng, 8, 8);
        auto g = random_tensor(rng, 1, 8, 0.5, 1.5);
        auto b = random_tensor(rng, 1, 8, -0.2, 0.2);
        auto res = grad_check({x, w, g, b}, [](Tape& t, const std::vector<Var>& in) {
            auto h = t.matmul(in[0], in[1]);
            h = t.layer_norm(h, in[2], in[3], 1e-5);
            h = t.gelu(h);
            auto p = t.softmax_rows(h);
            auto e = t.row_entropy(h);
            return t.add(t.mean_all(t.mul(p, h)), t.mean_all(e));
        }, 1e-5);
        CHECK(res.max_rel_err < 1e-4);
    }
}
