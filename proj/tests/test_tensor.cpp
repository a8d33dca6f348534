#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "worldfuse/checkpoint.hpp"
#include "worldfuse/tensor.hpp"

using namespace worldfuse;

TEST_CASE("matmul identity and hand-checked products") {
    Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(i2, i2);
    CHECK(c.data()[0] == 1.0);
    CHECK(c.data()[1] == 0.0);
    CHECK(c.data()[2] == 0.0);
    CHECK(c.data()[3] == 1.0);

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {0, 1});
    Tensor p = matmul(a, b);
    CHECK(p.at(0, 0) == doctest::Approx(2.0));
    CHECK(p.at(1, 0) == doctest::Approx(4.0));

    CHECK_THROWS_AS(matmul(a, Tensor::from({3, 1}, {1, 2, 3})), dimension_error);
}

TEST_CASE("matmul gradients match central differences") {
    Rng rng(42);
    for (int trial = 0; trial < 5; ++trial) {
        ParamStore ps;
        std::vector<double> av(12), bv(8);
        for (auto& v : av) v = rng.uniform(-1, 1);
        for (auto& v : bv) v = rng.uniform(-1, 1);
        ps.add("a", Tensor::parameter({3, 4}, av));
        ps.add("b", Tensor::parameter({4, 2}, bv));
        auto loss_fn = [&]() {
            Tensor c = matmul(ps.get("a"), ps.get("b"));
            return sum(mul(c, c));
        };
        double err = testsupport::max_fd_rel_err(ps, loss_fn, rng);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("softmax_rows symmetry, stability, jacobian") {
    Tensor flat = softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
    for (int j = 0; j < 3; ++j) CHECK(flat.at(0, j) == doctest::Approx(1.0 / 3.0));

    Tensor big = softmax_rows(Tensor::from({1, 2}, {1000, 0}));
    CHECK(std::isfinite(big.at(0, 0)));
    CHECK(big.at(0, 0) == doctest::Approx(1.0));
    CHECK(big.at(0, 1) == doctest::Approx(0.0));

    Rng rng(7);
    ParamStore ps;
    std::vector<double> xv(6);
    for (auto& v : xv) v = rng.uniform(-1, 1);
    ps.add("x", Tensor::parameter({2, 3}, xv));
    std::vector<double> wv(6);
    for (auto& v : wv) v = rng.uniform(-1, 1);
    Tensor w = Tensor::from({2, 3}, wv);
    auto loss_fn = [&]() { return sum(mul(softmax_rows(ps.get("x"), 1.7), w)); };
    CHECK(testsupport::max_fd_rel_err(ps, loss_fn, rng) < 1e-4);

    // rows sum to one within 1e-12
    Tensor s = softmax_rows(ps.get("x"), 0.9);
    for (int i = 0; i < 2; ++i) {
        double acc = 0;
        for (int j = 0; j < 3; ++j) acc += s.at(i, j);
        CHECK(std::fabs(acc - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax_rows is permutation-equivariant") {
    Rng rng(11);
    std::vector<double> xv(5);
    for (auto& v : xv) v = rng.uniform(-2, 2);
    Tensor s = softmax_rows(Tensor::from({1, 5}, xv));
    std::vector<double> perm = {xv[3], xv[0], xv[4], xv[2], xv[1]};
    Tensor sp = softmax_rows(Tensor::from({1, 5}, perm));
    CHECK(sp.at(0, 0) == doctest::Approx(s.at(0, 3)).epsilon(1e-14));
    CHECK(sp.at(0, 1) == doctest::Approx(s.at(0, 0)).epsilon(1e-14));
    CHECK(sp.at(0, 4) == doctest::Approx(s.at(0, 1)).epsilon(1e-14));
}

TEST_CASE("cross_entropy analytic values and gradient") {
    // probability 1 on target -> loss 0
    Tensor sharp = Tensor::from({1, 3}, {100, 0, 0});
    Tensor l0 = cross_entropy(sharp, {0}, {1});
    CHECK(l0.value() == doctest::Approx(0.0).epsilon(1e-12));

    // uniform logits, V=4 -> ln 4
    Tensor flat = Tensor::from({2, 4}, std::vector<double>(8, 0.25));
    Tensor l1 = cross_entropy(flat, {1, 3}, {1, 1});
    CHECK(l1.value() == doctest::Approx(std::log(4.0)));

    CHECK_THROWS_AS(cross_entropy(flat, {1, 3}, {0, 0}), argument_error);
    CHECK_THROWS_AS(cross_entropy(flat, {1, 9}, {1, 1}), argument_error);

    Rng rng(5);
    ParamStore ps;
    std::vector<double> lv(12);
    for (auto& v : lv) v = rng.uniform(-1, 1);
    ps.add("logits", Tensor::parameter({3, 4}, lv));
    auto loss_fn = [&]() { return cross_entropy(ps.get("logits"), {2, 0, 1}, {1, 0, 1}); };
    CHECK(testsupport::max_fd_rel_err(ps, loss_fn, rng) < 1e-4);
}

TEST_CASE("backward basics: sum and half squared norm") {
    ParamStore ps;
    ps.add("w", Tensor::parameter({2, 3}, {1, -2, 3, 0.5, 0, -1}));

    GradMap g1 = backward(sum(ps.get("w")), ps);
    for (double v : g1.at("w").data()) CHECK(v == 1.0);

    Tensor w = ps.get("w");
    GradMap g2 = backward(scale(sum(mul(w, w)), 0.5), ps);
    for (size_t i = 0; i < w.size(); ++i)
        CHECK(g2.at("w").data()[i] == doctest::Approx(w.data()[i]));

    CHECK_THROWS_AS(backward(ps.get("w"), ps), contract_error);
}

TEST_CASE("backward: unreachable parameters get zero gradients") {
    ParamStore ps;
    ps.add("used", Tensor::parameter({2}, {1, 2}));
    ps.add("unused", Tensor::parameter({3}, {1, 2, 3}));
    GradMap g = backward(sum(ps.get("used")), ps);
    for (double v : g.at("unused").data()) CHECK(v == 0.0);
}

TEST_CASE("backward is deterministic") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        ParamStore ps;
        std::vector<double> av(20), bv(20);
        for (auto& v : av) v = rng.uniform(-1, 1);
        for (auto& v : bv) v = rng.uniform(-1, 1);
        ps.add("a", Tensor::parameter({4, 5}, av));
        ps.add("b", Tensor::parameter({5, 4}, bv));
        Tensor c = matmul(ps.get("a"), ps.get("b"));
        Tensor loss = sum(mul(gelu(c), softmax_rows(c)));
        GradMap g = backward(loss, ps);
        std::vector<double> out(g.at("a").data().begin(), g.at("a").data().end());
        out.insert(out.end(), g.at("b").data().begin(), g.at("b").data().end());
        return out;
    };
    std::vector<double> r1 = run(99), r2 = run(99);
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("sgd_step contract") {
    ParamStore ps;
    ps.add("w", Tensor::parameter({1}, {1.0}));

    GradMap zero;
    zero.emplace("w", Tensor::zeros({1}));
    sgd_step(ps, zero, 0.5);
    CHECK(ps.get("w").data()[0] == 1.0);

    GradMap two;
    two.emplace("w", Tensor::from({1}, {2.0}));
    sgd_step(ps, two, 0.5);
    CHECK(ps.get("w").data()[0] == 0.0);

    GradMap bad;
    bad.emplace("w", Tensor::from({1}, {std::nan("")}));
    CHECK_THROWS_AS(sgd_step(ps, bad, 0.1), training_error);

    ps.freeze();
    CHECK_THROWS_AS(sgd_step(ps, two, 0.1), contract_error);
}

TEST_CASE("sgd converges on a quadratic bowl") {
    ParamStore ps;
    ps.add("x", Tensor::parameter({3}, {4.0, -3.0, 2.5}));
    Tensor target = Tensor::from({3}, {1.0, 2.0, -0.5});
    for (int step = 0; step < 200; ++step) {
        Tensor diff = add(ps.get("x"), scale(target, -1.0));
        Tensor loss = scale(sum(mul(diff, diff)), 0.5);
        sgd_step(ps, backward(loss, ps), 0.3);
    }
    for (size_t i = 0; i < 3; ++i)
        CHECK(std::fabs(ps.get("x").data()[i] - target.data()[i]) < 1e-6);
}

TEST_CASE("gradient checks across the op set") {
    Rng rng(123);
    for (uint64_t seed = 0; seed < 12; ++seed) {
        Rng r(derive_seed(1000, seed));
        ParamStore ps;
        std::vector<double> xv(12), gv(4, 1.0), bv(4, 0.0), tv(24), biasv(6);
        for (auto& v : xv) v = r.uniform(-1, 1);
        for (auto& v : tv) v = r.uniform(-1, 1);
        for (auto& v : biasv) v = r.uniform(-1, 1);
        ps.add("x", Tensor::parameter({3, 4}, xv));
        ps.add("gamma", Tensor::parameter({4}, gv));
        ps.add("beta", Tensor::parameter({4}, bv));
        ps.add("table", Tensor::parameter({6, 4}, tv));
        ps.add("bias", Tensor::parameter({6}, biasv));
        auto loss_fn = [&]() {
            Tensor x = ps.get("x");
            Tensor ln = layernorm(x, ps.get("gamma"), ps.get("beta"));
            Tensor emb = embedding(ps.get("table"), {0, 2, 5});
            Tensor cat = concat_rows({ln, emb});                  // (6,4)
            Tensor act = gelu(cat);
            Tensor scores = causal_mask(matmul_nt(act, act));     // (6,6)
            Tensor attn = softmax_rows(scores, 0.5);
            Tensor mixed = matmul(attn, act);                     // (6,4)
            Tensor one = add_bias(matmul_nt(mixed, mixed), ps.get("bias"));
            Tensor part = slice_rows(one, 1, 5);
            return cross_entropy(part, {0, 3, 2, 1}, {1, 1, 0, 1});
        };
        double err = testsupport::max_fd_rel_err(ps, loss_fn, rng, 6);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("no-grad guard detaches computation") {
    ParamStore ps;
    ps.add("w", Tensor::parameter({2}, {1, 2}));
    Tensor loss;
    {
        autodiff::NoGradGuard ng;
        loss = sum(mul(ps.get("w"), ps.get("w")));
    }
    CHECK(!loss.requires_grad());
    GradMap g = backward(loss, ps);
    for (double v : g.at("w").data()) CHECK(v == 0.0);
}

TEST_CASE("parameter creation rejects non-finite values") {
    CHECK_THROWS_AS(Tensor::parameter({2}, {1.0, std::nan("")}), argument_error);
    CHECK_THROWS_AS(Tensor::parameter({1}, {std::numeric_limits<double>::infinity()}),
                    argument_error);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(2024);
    ParamStore ps;
    std::vector<double> a(12), b(5);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    a[0] = 0.1 + 0.2;  // a value with a non-trivial mantissa
    ps.add("layer0.weight", Tensor::parameter({3, 4}, a));
    ps.add("head.bias", Tensor::parameter({5}, b));

    testsupport::TempDir tmp("ckpt");
    std::string path = tmp.str() + "/model.ckpt";
    save_checkpoint(path, ps, {{"layers", "3"}, {"taps", "1,3"}});
    Checkpoint ck = load_checkpoint(path);

    CHECK(ck.meta.at("layers") == "3");
    CHECK(ck.meta.at("taps") == "1,3");
    REQUIRE(ck.params.count() == 2);
    for (const auto& name : ps.names()) {
        const Tensor& orig = ps.get(name);
        const Tensor& back = ck.params.get(name);
        REQUIRE(orig.shape() == back.shape());
        for (size_t i = 0; i < orig.size(); ++i) {
            uint64_t ob = std::bit_cast<uint64_t>(orig.data()[i]);
            uint64_t bb = std::bit_cast<uint64_t>(back.data()[i]);
            CHECK(ob == bb);
        }
    }
    CHECK(checkpoint_hash(ps) == checkpoint_hash(ck.params));
}
