#include "bigmoe/oracles.hpp"
#include "bigmoe/selfcheck.hpp"
#include "bigmoe/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace bigmoe;

namespace {

Tensor rnd(Shape s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return detail::random_tensor(std::move(s), rng);
}

} // namespace

TEST(Tensor, ConstructionChecksShape)
{
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    EXPECT_THROW(Tensor({2, 0}, {}), DimensionError);
    Tensor t = Tensor::zeros({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, MatmulIdentityAndHandCase)
{
    Tensor a = rnd({3, 3}, 1);
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    EXPECT_EQ(matmul(eye, a).values(), a.values());

    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor v = Tensor::from({2, 1}, {0, 1});
    Tensor r = matmul(m, v);
    EXPECT_EQ(r.shape(), (Shape{2, 1}));
    EXPECT_EQ(r.values(), (std::vector<double>{2, 4}));

    Tensor z = matmul(Tensor::zeros({2, 3}), a);
    for (double x : z.values())
        EXPECT_EQ(x, 0.0);
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Tensor, SoftmaxCases)
{
    Tensor u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (double p : u.values())
        EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
    Tensor big = softmax(Tensor::from({2}, {1000, 1000}), 0);
    EXPECT_EQ(big[0], 0.5);
    EXPECT_EQ(big[1], 0.5);
    Tensor two = softmax(Tensor::from({2}, {1, 2}), 0);
    const double e = std::exp(1.0);
    EXPECT_NEAR(two[0], 1.0 / (1.0 + e), 1e-15);
    EXPECT_NEAR(two[1], e / (1.0 + e), 1e-15);
}

TEST(Tensor, SoftmaxRowsSumToOne)
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = detail::random_tensor({4, 7}, rng, -50.0, 50.0);
        Tensor p = softmax(x, 1);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                EXPECT_GT(p.at({r, c}), 0.0 - 1e-300);
                s += p.at({r, c});
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Tensor, Conv2dCountingAndIdentity)
{
    Tensor ones = Tensor::full({1, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor r = conv2d(ones, k, 1, 0);
    EXPECT_EQ(r.shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(r[0], 9.0);

    Tensor x = rnd({2, 4, 5}, 2);
    Tensor id = Tensor::from({2, 2, 1, 1}, {1, 0, 0, 1});
    EXPECT_EQ(conv2d(x, id, 1, 0).values(), x.values());
    EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 2}), k, 1, 0), DimensionError);
}

TEST(Tensor, Conv2dMatchesNestedLoopOracle)
{
    for (std::size_t stride : {1, 2})
        for (std::size_t pad : {0, 1, 2}) {
            Tensor x = rnd({2, 5, 5}, 10 + stride + pad);
            Tensor w = rnd({3, 2, 3, 3}, 20 + stride + pad);
            Tensor y = conv2d(x, w, stride, pad);
            const std::size_t oh = (5 + 2 * pad - 3) / stride + 1;
            ASSERT_EQ(y.shape(), (Shape{3, oh, oh}));
            for (std::size_t o = 0; o < 3; ++o)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < oh; ++j) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < 2; ++c)
                            for (std::size_t u = 0; u < 3; ++u)
                                for (std::size_t v = 0; v < 3; ++v) {
                                    const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                                    const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                                    if (yy < 0 || xx < 0 || yy >= 5 || xx >= 5)
                                        continue;
                                    acc += w.at({o, c, u, v}) *
                                           x.at({c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)});
                                }
                        EXPECT_NEAR(y.at({o, i, j}), acc, 1e-9);
                    }
        }
}

TEST(Tensor, FamilyBasics)
{
    const std::vector<int> zero{0};
    EXPECT_NEAR(cross_entropy(Tensor::from({1, 2}, {0, 0}), zero).item(), std::log(2.0), 1e-15);
    const std::vector<int> bad{2};
    EXPECT_THROW(cross_entropy(Tensor::from({1, 2}, {0, 0}), bad), InputError);
    const std::vector<int> neg{-1};
    EXPECT_THROW(cross_entropy(Tensor::from({1, 2}, {0, 0}), neg), InputError);

    EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
    EXPECT_NEAR(gelu(Tensor::scalar(1.0)).item(), 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);

    Tensor ln = layer_norm(Tensor::full({2, 4}, 3.25));
    for (double v : ln.values())
        EXPECT_EQ(v, 0.0);

    EXPECT_NEAR(sigmoid(Tensor::scalar(0.0)).item(), 0.5, 0.0);
    Tensor c = concat({Tensor::from({1, 2}, {1, 2}), Tensor::from({1, 2}, {3, 4})}, 0);
    EXPECT_EQ(c.values(), (std::vector<double>{1, 2, 3, 4}));
    EXPECT_EQ(mean(c).item(), 2.5);
    EXPECT_EQ(reshape(c, {4}).shape(), (Shape{4}));
    EXPECT_THROW(reshape(c, {3}), DimensionError);
    EXPECT_EQ(mul(c, Tensor::scalar(2.0)).values(), (std::vector<double>{2, 4, 6, 8}));
    EXPECT_THROW(add(c, Tensor::zeros({2, 3})), DimensionError);
}

TEST(Autodiff, SumAndSquareGradients)
{
    Tensor x = rnd({2, 3}, 5).set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad())
        EXPECT_EQ(g, 1.0);

    Tensor y = rnd({2, 3}, 6).set_requires_grad(true);
    backward(sum(mul(y, y)));
    for (std::size_t i = 0; i < y.numel(); ++i)
        EXPECT_DOUBLE_EQ(y.grad()[i], 2.0 * y[i]);
}

TEST(Autodiff, DiamondAccumulatesBothPaths)
{
    // f = sum(exp(x) * tanh(x)); both branches share x.
    Tensor x = rnd({4}, 7).set_requires_grad(true);
    backward(sum(mul(exp(x), tanh(x))));
    for (std::size_t i = 0; i < 4; ++i) {
        const double v = x[i], t = std::tanh(v);
        EXPECT_NEAR(x.grad()[i], std::exp(v) * t + std::exp(v) * (1.0 - t * t), 1e-14);
    }
}

TEST(Autodiff, GradientsAccumulateAcrossCalls)
{
    Tensor x = Tensor::from({2}, {1.0, -2.0}, true);
    backward(sum(x));
    backward(sum(scale(x, 3.0)));
    EXPECT_EQ(x.grad()[0], 4.0);
    x.zero_grad();
    EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Autodiff, RejectsNonScalarLoss)
{
    Tensor x = rnd({3}, 8).set_requires_grad(true);
    EXPECT_THROW(backward(x), UsageError);
    EXPECT_THROW(backward(sum(rnd({3}, 9))), UsageError);
}

TEST(Autodiff, EveryOpMatchesFiniteDifferences)
{
    for (const auto& line : op_gradient_suite(23))
        EXPECT_TRUE(line.passed) << line.name << " rel err " << line.value;
}

TEST(Adam, ZeroGradZeroDecayLeavesParams)
{
    Tensor w = rnd({5}, 11).set_requires_grad(true);
    const auto before = w.values();
    w.zero_grad();
    std::vector<Tensor> ps{w};
    AdamState st;
    adam_step(ps, st);
    EXPECT_EQ(w.values(), before);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, MissingGradIsUsageError)
{
    std::vector<Tensor> ps{Tensor::zeros({2}, true)};
    AdamState st;
    EXPECT_THROW(adam_step(ps, st), UsageError);
}

TEST(Adam, MatchesScalarReferenceTrace)
{
    AdamOptions o;
    o.lr = 0.1;
    o.weight_decay = 0.01;
    Tensor w = Tensor::scalar(1.0, true);
    std::vector<Tensor> ps{w};
    AdamState st(o);

    double ref = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        backward(square(w));
        adam_step(ps, st);
        const double g = 2.0 * ref;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
        ref -= 0.1 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * ref);
        EXPECT_NEAR(w.item(), ref, 1e-15) << "step " << t;
        EXPECT_EQ(w.grad()[0], 0.0);
    }
    EXPECT_LT(w.item(), 1.0);
    EXPECT_EQ(st.step, 3u);
}
