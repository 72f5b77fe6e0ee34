#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "abft/tensor.hpp"
#include "support/oracles.hpp"

using namespace abft;

namespace {

TensorPtrT<double> random_matrix(int m, int n, Rng& rng, bool trainable = false) {
    std::vector<double> d(static_cast<size_t>(m) * n);
    for (auto& v : d) v = rng.normal();
    auto t = make_tensor<double>({m, n}, std::move(d));
    t->set_trainable(trainable);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
    auto eye = make_tensor<float>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto m = make_tensor<float>({3, 3}, {2, -1, 4, 0.5f, 3, 7, -2, 6, 1});
    auto prod = matmul(eye, m);
    for (int i = 0; i < 9; ++i) CHECK(prod->data[i] == m->data[i]);

    auto a = make_tensor<float>({2, 2}, {1, 2, 3, 4});
    auto z = make_tensor<float>({2, 2}, {0, 0, 0, 0});
    auto az = matmul(a, z);
    for (float v : az->data) CHECK(v == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = make_tensor<float>({2, 3});
    auto b = make_tensor<float>({4, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    try {
        matmul(a, b);
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2x3)") != std::string::npos);
        CHECK(msg.find("(4x2)") != std::string::npos);
    }
}

TEST_CASE("matmul forward matches reference and backward matches finite differences") {
    Rng rng(1234);
    auto a = random_matrix(4, 5, rng, true);
    auto b = random_matrix(5, 3, rng, true);

    auto c = matmul(a, b);
    auto ref = oracles::matmul_ref(a->data, b->data, 4, 5, 3);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(c->data[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    // scalar objective: weighted sum of entries
    std::vector<double> w(12);
    for (auto& v : w) v = rng.normal();

    auto objective = [&]() {
        auto cc = matmul(a, b);
        double s = 0;
        for (size_t i = 0; i < cc->data.size(); ++i) s += w[i] * cc->data[i];
        return s;
    };

    // autodiff gradient of the same objective
    auto c2 = matmul(a, b);  // (4x3)
    std::vector<TensorPtrT<double>> terms;
    for (int i = 0; i < 4; ++i) {
        auto row = take_row(c2, i);
        for (int j = 0; j < 3; ++j) {
            auto e = sum_positions(row, std::span<const int>(&j, 1));
            terms.push_back(scale(e, w[static_cast<size_t>(i) * 3 + j]));
        }
    }
    auto loss = sum_scalars(terms);
    backward(loss);

    for (size_t i = 0; i < a->data.size(); ++i) {
        double fd = oracles::finite_diff(objective, &a->data[i]);
        CHECK(oracles::rel_close(a->grad[i], fd, 1e-4, 1e-9));
    }
    for (size_t i = 0; i < b->data.size(); ++i) {
        double fd = oracles::finite_diff(objective, &b->data[i]);
        CHECK(oracles::rel_close(b->grad[i], fd, 1e-4, 1e-9));
    }
}

TEST_CASE("row_softmax unmasked symmetric row and causal first row") {
    auto x = make_tensor<float>({1, 2}, {0, 0});
    auto y = row_softmax_masked(x, false);
    CHECK(y->data[0] == doctest::Approx(0.5));
    CHECK(y->data[1] == doctest::Approx(0.5));

    auto z = make_tensor<float>({3, 3}, {5, -2, 9, 1, 1, 1, 0, 3, -4});
    auto s = row_softmax_masked(z, true);
    CHECK(s->data[0] == 1.0f);
    CHECK(s->data[1] == 0.0f);  // masked entries bit-exact zero
    CHECK(s->data[2] == 0.0f);
}

TEST_CASE("row_softmax matches high-precision oracle") {
    auto x = make_tensor<double>({1, 3}, {1, 2, 3});
    auto y = row_softmax_masked(x, false);
    auto ref = oracles::softmax_ref({1, 2, 3});
    for (int i = 0; i < 3; ++i) CHECK(std::abs(y->data[i] - ref[i]) < 1e-9);
}

TEST_CASE("row_softmax rows sum to one, causal requires square") {
    Rng rng(7);
    auto x = random_matrix(6, 6, rng);
    auto xf = make_tensor<float>({6, 6});
    for (size_t i = 0; i < x->data.size(); ++i) xf->data[i] = static_cast<float>(x->data[i] * 3);
    auto y = row_softmax_masked(xf, true);
    for (int i = 0; i < 6; ++i) {
        double s = 0;
        for (int j = 0; j < 6; ++j) {
            s += y->data[static_cast<size_t>(i) * 6 + j];
            if (j > i) CHECK(y->data[static_cast<size_t>(i) * 6 + j] == 0.0f);
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    auto bad = make_tensor<float>({2, 3});
    CHECK_THROWS_AS(row_softmax_masked(bad, true), ShapeError);
}

TEST_CASE("softmax backward matches finite differences") {
    Rng rng(42);
    auto x = random_matrix(4, 4, rng, true);
    std::vector<double> w(16);
    for (auto& v : w) v = rng.normal();

    auto objective = [&]() {
        auto y = row_softmax_masked(x, true);
        double s = 0;
        for (size_t i = 0; i < y->data.size(); ++i) s += w[i] * y->data[i];
        return s;
    };

    auto y = row_softmax_masked(x, true);
    std::vector<TensorPtrT<double>> terms;
    for (int i = 0; i < 4; ++i) {
        auto row = take_row(y, i);
        for (int j = 0; j < 4; ++j) {
            auto e = sum_positions(row, std::span<const int>(&j, 1));
            terms.push_back(scale(e, w[static_cast<size_t>(i) * 4 + j]));
        }
    }
    backward(sum_scalars(terms));
    for (size_t i = 0; i < x->data.size(); ++i) {
        double fd = oracles::finite_diff(objective, &x->data[i]);
        CHECK(oracles::rel_close(x->grad[i], fd, 1e-3, 1e-9));
    }
}

TEST_CASE("layer_norm constant row maps to bias, normalized row kept") {
    auto x = make_tensor<float>({1, 4}, {3, 3, 3, 3});
    auto g = make_tensor<float>({4}, {1, 1, 1, 1});
    auto b = make_tensor<float>({4}, {0, 0, 0, 0});
    auto y = layer_norm(x, g, b);
    for (float v : y->data) CHECK(std::abs(v) < 1e-6f);

    auto x2 = make_tensor<float>({1, 2}, {1, -1});
    auto g2 = make_tensor<float>({2}, {1, 1});
    auto b2 = make_tensor<float>({2}, {0, 0});
    auto y2 = layer_norm(x2, g2, b2);
    CHECK(y2->data[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(y2->data[1] == doctest::Approx(-1.0).epsilon(1e-4));

    auto gbad = make_tensor<float>({3});
    CHECK_THROWS_AS(layer_norm(x2, gbad, b2), ShapeError);
}

TEST_CASE("layer_norm backward matches finite differences") {
    Rng rng(99);
    auto x = random_matrix(3, 5, rng, true);
    auto g = make_tensor<double>({5}, {1.1, 0.9, 1.3, 0.7, 1.0});
    auto b = make_tensor<double>({5}, {0.1, -0.2, 0.0, 0.3, -0.1});
    g->set_trainable(true);
    b->set_trainable(true);
    std::vector<double> w(15);
    for (auto& v : w) v = rng.normal();

    auto objective = [&]() {
        auto y = layer_norm(x, g, b);
        double s = 0;
        for (size_t i = 0; i < y->data.size(); ++i) s += w[i] * y->data[i];
        return s;
    };
    auto y = layer_norm(x, g, b);
    std::vector<TensorPtrT<double>> terms;
    for (int i = 0; i < 3; ++i) {
        auto row = take_row(y, i);
        for (int j = 0; j < 5; ++j) {
            auto e = sum_positions(row, std::span<const int>(&j, 1));
            terms.push_back(scale(e, w[static_cast<size_t>(i) * 5 + j]));
        }
    }
    backward(sum_scalars(terms));
    for (size_t i = 0; i < x->data.size(); ++i)
        CHECK(oracles::rel_close(x->grad[i], oracles::finite_diff(objective, &x->data[i]), 1e-4, 1e-8));
    for (size_t i = 0; i < g->data.size(); ++i)
        CHECK(oracles::rel_close(g->grad[i], oracles::finite_diff(objective, &g->data[i]), 1e-4, 1e-8));
    for (size_t i = 0; i < b->data.size(); ++i)
        CHECK(oracles::rel_close(b->grad[i], oracles::finite_diff(objective, &b->data[i]), 1e-4, 1e-8));
}

TEST_CASE("cross_entropy uniform, saturated, and oracle cases") {
    const int v = 7;
    auto logits = make_tensor<float>({v});
    auto l = cross_entropy(logits, 3);
    CHECK(l->value() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-6));

    auto sharp = make_tensor<float>({4}, {100, 0, 0, 0});
    CHECK(cross_entropy(sharp, 0)->value() == doctest::Approx(0.0).epsilon(1e-6));

    CHECK_THROWS_AS(cross_entropy(sharp, 4), ContractError);
    CHECK_THROWS_AS(cross_entropy(sharp, -1), ContractError);

    Rng rng(5);
    std::vector<double> raw(9);
    for (auto& x : raw) x = rng.normal() * 2;
    auto lg = make_tensor<double>({9}, std::vector<double>(raw));
    lg->set_trainable(true);
    auto loss = cross_entropy(lg, 4);
    CHECK(std::abs(loss->value() - oracles::cross_entropy_ref(raw, 4)) < 1e-6);

    backward(loss);
    auto objective = [&]() { return cross_entropy(lg, 4)->value(); };
    for (size_t i = 0; i < lg->data.size(); ++i)
        CHECK(oracles::rel_close(lg->grad[i], oracles::finite_diff(objective, &lg->data[i]), 1e-6, 1e-9));
}

TEST_CASE("backward of linear map gives broadcast structure and accumulates across uses") {
    // loss = sum(W x): grad(W) = x broadcast per row
    auto w = make_tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6});
    w->set_trainable(true);
    auto x = make_tensor<double>({2, 1}, {10, 20});
    auto y = matmul(w, x);
    std::vector<TensorPtrT<double>> terms;
    for (int i = 0; i < 3; ++i) terms.push_back(take_row(y, i));
    backward(sum_scalars(terms));
    for (int i = 0; i < 3; ++i) {
        CHECK(w->grad[static_cast<size_t>(i) * 2 + 0] == 10.0);
        CHECK(w->grad[static_cast<size_t>(i) * 2 + 1] == 20.0);
    }

    // two uses of the same tensor: gradients add
    auto a = make_tensor<double>({1, 2}, {3, -4});
    a->set_trainable(true);
    auto once = take_row(matmul(a, make_tensor<double>({2, 1}, {1, 1})), 0);
    backward(once);
    std::vector<double> single = a->grad;

    a->zero_grad();
    auto u1 = take_row(matmul(a, make_tensor<double>({2, 1}, {1, 1})), 0);
    auto u2 = take_row(matmul(a, make_tensor<double>({2, 1}, {1, 1})), 0);
    backward(sum_scalars(std::vector<TensorPtrT<double>>{u1, u2}));
    for (size_t i = 0; i < a->data.size(); ++i) CHECK(a->grad[i] == 2 * single[i]);
}

TEST_CASE("backward contract violations") {
    auto m = make_tensor<float>({2, 2}, {1, 2, 3, 4});
    m->set_trainable(true);
    auto y = matmul(m, m);
    CHECK_THROWS_AS(backward(y), ContractError);  // non-scalar

    auto c = make_scalar<float>(1.0f);
    CHECK_THROWS_AS(backward(c), ContractError);  // not produced by recorded ops
}

TEST_CASE("frozen leaves receive no gradient buffer") {
    auto w = make_tensor<double>({2, 2}, {1, 0, 0, 1});
    w->set_trainable(true);
    auto frozen = make_tensor<double>({2, 2}, {1, 2, 3, 4});  // trainable=false
    auto y = matmul(w, frozen);
    std::vector<TensorPtrT<double>> terms;
    for (int i = 0; i < 2; ++i) terms.push_back(take_row(y, i));
    std::vector<TensorPtrT<double>> sums{sum_positions(terms[0], std::vector<int>{0, 1}),
                                         sum_positions(terms[1], std::vector<int>{0, 1})};
    backward(sum_scalars(sums));
    CHECK(!w->grad.empty());
    CHECK(frozen->grad.empty());
}

TEST_CASE("no-grad mode records no graph") {
    auto w = make_tensor<float>({2, 2}, {1, 2, 3, 4});
    w->set_trainable(true);
    NoGradGuard guard;
    auto y = matmul(w, w);
    CHECK(y->parents.empty());
    CHECK(!y->requires_grad);
}

TEST_CASE("gelu and embedding backward match finite differences") {
    Rng rng(21);
    auto x = random_matrix(2, 3, rng, true);
    auto objective = [&]() {
        auto y = gelu(x);
        double s = 0;
        for (double v : y->data) s += v;
        return s;
    };
    auto y = gelu(x);
    std::vector<TensorPtrT<double>> terms;
    for (int i = 0; i < 2; ++i)
        terms.push_back(sum_positions(take_row(y, i), std::vector<int>{0, 1, 2}));
    backward(sum_scalars(terms));
    for (size_t i = 0; i < x->data.size(); ++i)
        CHECK(oracles::rel_close(x->grad[i], oracles::finite_diff(objective, &x->data[i]), 1e-4, 1e-8));

    auto table = random_matrix(5, 3, rng, true);
    std::vector<int> ids{1, 4, 1};
    auto emb = embedding_rows(table, ids);
    std::vector<TensorPtrT<double>> t2;
    for (int i = 0; i < 3; ++i) t2.push_back(sum_positions(take_row(emb, i), std::vector<int>{0, 1, 2}));
    backward(sum_scalars(t2));
    // row 1 used twice -> grad 2, row 4 once -> grad 1, others 0
    for (int j = 0; j < 3; ++j) {
        CHECK(table->grad[3 + j] == 2.0);
        CHECK(table->grad[12 + j] == 1.0);
        CHECK(table->grad[0 + j] == 0.0);
    }
    CHECK_THROWS_AS(embedding_rows(table, std::vector<int>{5}), ContractError);
}

TEST_CASE("adam first step magnitude and zero-grad no-op") {
    auto p = make_tensor<float>({1}, {1.0f});
    p->set_trainable(true);
    AdamState opt({p}, 0.1f);

    p->ensure_grad();
    p->grad[0] = 1.0f;
    opt.step();
    // bias-corrected first step: delta = -lr * g / (|g| + eps) ~ -0.1
    CHECK(p->data[0] == doctest::Approx(0.9).epsilon(1e-5));
    CHECK(p->grad[0] == 0.0f);  // zeroed afterwards
    CHECK(opt.step_count == 1);

    // zero gradient from a fresh state: parameters unchanged
    auto q = make_tensor<float>({3}, {1, -2, 3});
    q->set_trainable(true);
    AdamState opt2({q}, 0.1f);
    q->zero_grad();
    opt2.step();
    CHECK(q->data[0] == 1.0f);
    CHECK(q->data[1] == -2.0f);
    CHECK(q->data[2] == 3.0f);
    CHECK(opt2.step_count == 1);
}

TEST_CASE("adam constant gradient drifts monotonically against its sign") {
    auto p = make_tensor<float>({1}, {0.5f});
    p->set_trainable(true);
    AdamState opt({p}, 0.01f);
    float prev = p->data[0];
    for (int i = 0; i < 20; ++i) {
        p->ensure_grad();
        p->grad[0] = 2.5f;
        opt.step();
        CHECK(p->data[0] < prev);
        prev = p->data[0];
    }
}

TEST_CASE("adam missing gradient is a contract error") {
    auto p = make_tensor<float>({2}, {1, 2});
    p->set_trainable(true);
    AdamState opt({p}, 0.1f);
    CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("operations are deterministic and finite") {
    Rng rng1(77), rng2(77);
    auto a1 = random_matrix(8, 8, rng1);
    auto a2 = random_matrix(8, 8, rng2);
    for (size_t i = 0; i < a1->data.size(); ++i) CHECK(a1->data[i] == a2->data[i]);
    auto y1 = row_softmax_masked(a1, true);
    auto y2 = row_softmax_masked(a2, true);
    for (size_t i = 0; i < y1->data.size(); ++i) CHECK(y1->data[i] == y2->data[i]);
    CHECK(all_finite(*y1));
    auto p = matmul(a1, a2);
    CHECK(all_finite(*p));
}
