#include <doctest.h>

#include <cmath>
#include <random>

#include <kvcar/error.hpp>
#include <kvcar/tensor.hpp>

using namespace kvcar;

namespace {
Tensor t2(std::vector<float> data, int64_t r, int64_t c) {
    return Tensor::from_data({r, c}, std::move(data));
}
} // namespace

TEST_CASE("matmul identity and orthogonal cases") {
    Tensor eye = t2({1, 0, 0, 1}, 2, 2);
    Tensor a = t2({1, 2, 3, 4}, 2, 2);
    Tensor r = matmul(eye, a);
    for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == a.data()[i]);

    Tensor row = t2({1, 0}, 1, 2);
    Tensor col = t2({0, 5}, 2, 1);
    CHECK(matmul(row, col).item() == 0.0f);
}

TEST_CASE("matmul matches a scalar triple-loop oracle exactly") {
    std::mt19937 gen(7);
    Tensor a = Tensor::randn({3, 4}, gen, 1.0f);
    Tensor b = Tensor::randn({4, 2}, gen, 1.0f);
    Tensor c = matmul(a, b);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            double s = 0;
            for (int64_t k = 0; k < 4; ++k) s += double(a.at(i, k)) * b.at(k, j);
            CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-6));
        }
}

TEST_CASE("matmul rejects mismatched inner extents") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("softmax rows: singleton, symmetry, shift invariance") {
    CHECK(softmax_rows(t2({42.0f}, 1, 1)).item() == 1.0f);
    CHECK(softmax_rows(t2({-3.0f}, 1, 1)).item() == 1.0f);

    Tensor sym = softmax_rows(t2({0, 0}, 1, 2));
    CHECK(sym.at(0, 0) == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(sym.at(0, 1) == doctest::Approx(0.5).epsilon(1e-7));

    Tensor big = softmax_rows(t2({1000.0f, 1000.5f}, 1, 2));
    Tensor small = softmax_rows(t2({0.0f, 0.5f}, 1, 2));
    for (int j = 0; j < 2; ++j) {
        CHECK(std::isfinite(big.at(0, j)));
        CHECK(std::abs(big.at(0, j) - small.at(0, j)) < 1e-6);
    }
}

TEST_CASE("softmax rows sum to one within 1e-6 on random input") {
    std::mt19937 gen(11);
    Tensor x = Tensor::randn({8, 17}, gen, 3.0f);
    Tensor s = softmax_rows(x);
    for (int64_t i = 0; i < 8; ++i) {
        double sum = 0;
        for (int64_t j = 0; j < 17; ++j) sum += s.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("elementwise definitions") {
    Tensor x = t2({-2.0f}, 1, 1);
    CHECK(leaky_relu(x, 0.01f).item() == doctest::Approx(-0.02).epsilon(1e-7));
    CHECK(gelu(t2({0.0f}, 1, 1)).item() == 0.0f);

    Tensor a = t2({1, 2, 3, 4}, 2, 2);
    Tensor b = add_scalar(a, 1.0f);
    for (int i = 0; i < 4; ++i) CHECK(b.data()[i] == a.data()[i] + 1.0f);

    Tensor m = mul(a, a);
    for (int i = 0; i < 4; ++i) CHECK(m.data()[i] == a.data()[i] * a.data()[i]);

    CHECK_THROWS_AS(add(a, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("layernorm handles degenerate variance and hand case") {
    Tensor gamma = Tensor::full({4}, 1.0f);
    Tensor beta = Tensor::from_data({4}, {0.5f, -0.5f, 1.5f, 0.0f});
    Tensor constant = t2({3, 3, 3, 3}, 1, 4);
    Tensor out = layernorm(constant, gamma, beta);
    for (int j = 0; j < 4; ++j) CHECK(std::abs(out.at(0, j) - beta.data()[j]) < 1e-3);

    Tensor g1 = Tensor::full({2}, 1.0f);
    Tensor b0 = Tensor::zeros({2});
    Tensor h = layernorm(t2({1, 3}, 1, 2), g1, b0);
    CHECK(h.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(h.at(0, 1) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layernorm output mean tracks the beta mean") {
    std::mt19937 gen(3);
    Tensor x = Tensor::randn({6, 16}, gen, 2.0f);
    Tensor gamma = Tensor::full({16}, 1.0f);
    Tensor beta = Tensor::randn({16}, gen, 1.0f);
    double beta_mean = 0;
    for (float v : beta.data()) beta_mean += v;
    beta_mean /= 16;
    Tensor out = layernorm(x, gamma, beta);
    for (int64_t i = 0; i < 6; ++i) {
        double mean = 0;
        for (int64_t j = 0; j < 16; ++j) mean += out.at(i, j);
        mean /= 16;
        CHECK(std::abs(mean - beta_mean) < 1e-4);
    }
}

TEST_CASE("batchnorm eval with identity stats is a no-op") {
    auto state = BatchNormState::make(3);
    Tensor gamma = Tensor::full({3}, 1.0f);
    Tensor beta = Tensor::zeros({3});
    // The eval scale is 1/sqrt(1 + eps), so the deviation is ~5e-6·|x|.
    Tensor x = t2({0.05f, -0.1f, 0.15f, 0.12f, -0.02f, -0.08f}, 2, 3);
    Tensor out = batchnorm(x, gamma, beta, state, Mode::eval);
    for (int i = 0; i < 6; ++i) CHECK(std::abs(out.data()[i] - x.data()[i]) < 1e-6);
}

TEST_CASE("batchnorm train on identical rows gives zero before affine") {
    auto state = BatchNormState::make(2);
    Tensor gamma = Tensor::full({2}, 1.0f);
    Tensor beta = Tensor::zeros({2});
    Tensor x = t2({1.5f, -2.0f, 1.5f, -2.0f}, 2, 2);
    Tensor out = batchnorm(x, gamma, beta, state, Mode::train);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(out.data()[i]) < 1e-4);
}

TEST_CASE("batchnorm requires a real batch in train mode") {
    auto state = BatchNormState::make(2);
    Tensor gamma = Tensor::full({2}, 1.0f);
    Tensor beta = Tensor::zeros({2});
    CHECK_THROWS_AS(batchnorm(t2({1, 2}, 1, 2), gamma, beta, state, Mode::train), ShapeError);
}

TEST_CASE("batchnorm train-then-eval consistency on a fixed distribution") {
    std::mt19937 gen(17);
    auto state = BatchNormState::make(4);
    Tensor gamma = Tensor::full({4}, 1.0f);
    Tensor beta = Tensor::zeros({4});
    Tensor last_train;
    Tensor last_x;
    for (int step = 0; step < 80; ++step) {
        Tensor x = Tensor::randn({2048, 4}, gen, 0.7f);
        last_train = batchnorm(x, gamma, beta, state, Mode::train);
        last_x = x;
    }
    Tensor eval_out = batchnorm(last_x, gamma, beta, state, Mode::eval);
    // Eval normalization should agree with the train-mode output within 5%.
    double num = 0, den = 0;
    for (int i = 0; i < eval_out.numel(); ++i) {
        num += std::abs(double(eval_out.data()[i]) - last_train.data()[i]);
        den += std::abs(double(last_train.data()[i]));
    }
    CHECK(num / den < 0.05);
}

TEST_CASE("losses: l1 and cross entropy analytic values") {
    Tensor x = t2({1, 2, 3}, 1, 3);
    CHECK(l1_loss(x, x).item() == 0.0f);
    CHECK(l1_loss(t2({1, 2}, 1, 2), t2({2, 4}, 1, 2)).item() == doctest::Approx(1.5).epsilon(1e-7));

    const int64_t v = 11;
    Tensor logits = Tensor::zeros({3, v});
    std::vector<int32_t> targets{0, 5, 10};
    CHECK(cross_entropy(logits, targets).item() ==
          doctest::Approx(std::log(double(v))).epsilon(1e-6));

    std::vector<int32_t> bad{0, 5, 11};
    CHECK_THROWS_AS(cross_entropy(logits, bad), ShapeError);
}

TEST_CASE("ops never mutate their inputs") {
    std::mt19937 gen(5);
    Tensor a = Tensor::randn({4, 4}, gen, 1.0f);
    Tensor b = Tensor::randn({4, 4}, gen, 1.0f);
    const uint64_t ha = data_hash(a), hb = data_hash(b);
    (void)matmul(a, b);
    (void)add(a, b);
    (void)mul(a, b);
    (void)softmax_rows(a);
    (void)gelu(a);
    (void)leaky_relu(b, 0.01f);
    (void)transpose(a);
    (void)slice_cols(a, 1, 3);
    (void)l1_loss(a, b);
    CHECK(data_hash(a) == ha);
    CHECK(data_hash(b) == hb);
}

TEST_CASE("non-finite values are rejected") {
    CHECK_THROWS_AS(Tensor::from_data({1}, {std::nanf("")}), NumericsError);
    CHECK_THROWS_AS(Tensor::from_data({1}, {INFINITY}), NumericsError);
}

TEST_CASE("slice and concat round trips") {
    std::mt19937 gen(9);
    Tensor x = Tensor::randn({5, 8}, gen, 1.0f);
    Tensor left = slice_cols(x, 0, 3);
    Tensor right = slice_cols(x, 3, 8);
    const Tensor parts[] = {left, right};
    Tensor back = concat_cols(parts);
    CHECK(data_hash(back) == data_hash(x));

    Tensor top = slice_rows(x, 0, 2);
    Tensor bottom = slice_rows(x, 2, 5);
    const Tensor rparts[] = {top, bottom};
    CHECK(data_hash(concat_rows(rparts)) == data_hash(x));
}

TEST_CASE("gather_rows picks table rows") {
    Tensor table = t2({0, 1, 10, 11, 20, 21}, 3, 2);
    std::vector<int32_t> ids{2, 0, 2};
    Tensor g = gather_rows(table, ids);
    CHECK(g.at(0, 0) == 20.0f);
    CHECK(g.at(1, 1) == 1.0f);
    CHECK(g.at(2, 1) == 21.0f);
    std::vector<int32_t> bad{3};
    CHECK_THROWS_AS(gather_rows(table, bad), ShapeError);
}
