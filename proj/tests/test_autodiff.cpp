#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "psrlab/common.hpp"
#include "psrlab/optim.hpp"
#include "psrlab/rng.hpp"
#include "psrlab/tape.hpp"
#include "test_support.hpp"

using namespace psrlab;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

}  // namespace

TEST_CASE("matmul identity and softmax symmetry") {
    Rng rng(1);
    Tape tape;
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.data[static_cast<std::size_t>(i * 3 + i)] = 1.0;
    const Tensor x = random_tensor({3, 5}, rng);
    const int out = tape.matmul(tape.constant(eye), tape.constant(x));
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(tape.value(out).data[i] == doctest::Approx(x.data[i]));

    Tape tape2;
    const int sm = tape2.softmax_last(tape2.constant(Tensor({1, 3}, {0.0, 0.0, 0.0})));
    for (int i = 0; i < 3; ++i)
        CHECK(tape2.value(sm).data[static_cast<std::size_t>(i)] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("layer-norm of a constant row maps to zeros before affine") {
    Tape tape;
    const int x = tape.constant(Tensor({2, 4}, {3.0, 3.0, 3.0, 3.0, -1.5, -1.5, -1.5, -1.5}));
    const int gain = tape.constant(Tensor::full({4}, 1.0));
    const int bias = tape.constant(Tensor({4}));
    const int out = tape.layer_norm(x, gain, bias);
    for (double v : tape.value(out).data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("trivial backward identities") {
    Tape tape;
    const int x = tape.param("x", Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
    const int s = tape.sum_all(x);
    auto grads = tape.backward(s);
    for (double v : grads.at("x").data) CHECK(v == doctest::Approx(1.0));

    Tape tape2;
    const int y = tape2.param("x", Tensor({2}, {1.0, 2.0}));
    const int sq = tape2.sum_all(tape2.mul(y, y));
    auto g2 = tape2.backward(sq);
    CHECK(g2.at("x").data[0] == doctest::Approx(2.0));
    CHECK(g2.at("x").data[1] == doctest::Approx(4.0));
}

TEST_CASE("finite-difference oracle passes for every op") {
    Rng rng(42);
    double worst = 0.0;
    // Each lambda builds a scalar loss touching the op under test.
    struct OpCase {
        const char* name;
        std::function<int(Tape&, int, int)> build;  // takes two param nodes
    };
    const std::vector<OpCase> cases = {
        {"add", [](Tape& t, int a, int b) { return t.mean_all(t.add(a, b)); }},
        {"sub", [](Tape& t, int a, int b) { return t.mean_all(t.mul(t.sub(a, b), t.sub(a, b))); }},
        {"scalar_mul", [](Tape& t, int a, int) { return t.sum_all(t.scalar_mul(a, -1.7)); }},
        {"mul", [](Tape& t, int a, int b) { return t.mean_all(t.mul(a, b)); }},
        {"matmul",
         [](Tape& t, int a, int b) { return t.mean_all(t.mul(t.matmul(a, t.transpose(b, 0, 1)), t.matmul(a, t.transpose(b, 0, 1)))); }},
        {"transpose", [](Tape& t, int a, int b) { return t.mean_all(t.mul(t.transpose(a, 0, 1), t.transpose(b, 0, 1))); }},
        {"reshape", [](Tape& t, int a, int) { return t.sum_all(t.mul(t.reshape(a, {24}), t.reshape(a, {24}))); }},
        {"concat0", [](Tape& t, int a, int b) { return t.mean_all(t.mul(t.concat(a, b, 0), t.concat(b, a, 0))); }},
        {"concat1", [](Tape& t, int a, int b) { return t.mean_all(t.mul(t.concat(a, b, 1), t.concat(b, a, 1))); }},
        {"slice", [](Tape& t, int a, int) { return t.mean_all(t.slice(a, 1, 1, 3)); }},
        {"mean", [](Tape& t, int a, int) { return t.mean_all(a); }},
        {"sum", [](Tape& t, int a, int b) { return t.sum_all(t.mul(a, b)); }},
        {"tanh", [](Tape& t, int a, int) { return t.mean_all(t.tanh(a)); }},
        {"gelu", [](Tape& t, int a, int) { return t.mean_all(t.gelu(a)); }},
        {"exp", [](Tape& t, int a, int) { return t.mean_all(t.exp(t.scalar_mul(a, 0.3))); }},
        {"softmax", [](Tape& t, int a, int b) { return t.mean_all(t.mul(t.softmax_last(a), b)); }},
    };
    for (const auto& c : cases) {
        for (int rep = 0; rep < 4; ++rep) {
            ParamMap params;
            params.emplace("a", random_tensor({4, 6}, rng));
            params.emplace("b", random_tensor({4, 6}, rng));
            [[maybe_unused]] auto loss = [&](const ParamMap& p) {
                Tape t;
                const int a = t.param("a", p.at("a"));
                const int b = t.param("b", p.at("b"));
                return t.value(c.build(t, a, b)).data[0];
            };
            Tape t;
            const int a = t.param("a", params.at("a"));
            const int b = t.param("b", params.at("b"));
            const int node = c.build(t, a, b);
            const auto grads = t.backward(node);
            const auto report = test::fd_compare(loss, params, grads, 4, rng);
            INFO(c.name);
            CHECK(report.max_rel_err < 1e-4);
            worst = std::max(worst, report.max_rel_err);
        }
    }

    // bias_add, layer_norm and gather need structured operands.
    for (int rep = 0; rep < 4; ++rep) {
        ParamMap params;
        params.emplace("x", random_tensor({5, 8}, rng));
        params.emplace("b", random_tensor({8}, rng));
        params.emplace("g", random_tensor({8}, rng, 0.5));
        [[maybe_unused]] auto loss = [&](const ParamMap& p) {
            Tape t;
            const int x = t.param("x", p.at("x"));
            const int b = t.param("b", p.at("b"));
            const int g = t.param("g", p.at("g"));
            return t.value(t.mean_all(t.mul(t.layer_norm(t.bias_add(x, b), g, b), t.bias_add(x, b)))).data[0];
        };
        Tape t;
        const int x = t.param("x", params.at("x"));
        const int b = t.param("b", params.at("b"));
        const int g = t.param("g", params.at("g"));
        const int node = t.mean_all(t.mul(t.layer_norm(t.bias_add(x, b), g, b), t.bias_add(x, b)));
        const auto report = test::fd_compare(loss, params, t.backward(node), 6, rng);
        CHECK(report.max_rel_err < 1e-4);

        ParamMap params2;
        params2.emplace("table", random_tensor({7, 5}, rng));
        const std::vector<std::size_t> idx = {2, 2, 0, 6};
        auto loss2 = [&](const ParamMap& p) {
            Tape t2;
            const int tab = t2.param("table", p.at("table"));
            return t2.value(t2.mean_all(t2.mul(t2.gather_rows(tab, idx), t2.gather_rows(tab, idx)))).data[0];
        };
        Tape t2;
        const int tab = t2.param("table", params2.at("table"));
        const int node2 = t2.mean_all(t2.mul(t2.gather_rows(tab, idx), t2.gather_rows(tab, idx)));
        const auto report2 = test::fd_compare(loss2, params2, t2.backward(node2), 6, rng);
        CHECK(report2.max_rel_err < 1e-4);
    }
}

TEST_CASE("random 2-layer network matches central differences on 100 parameters") {
    Rng rng(7);
    ParamMap params;
    params.emplace("w1", random_tensor({6, 10}, rng, 0.5));
    params.emplace("b1", random_tensor({10}, rng, 0.1));
    params.emplace("w2", random_tensor({10, 3}, rng, 0.5));
    params.emplace("b2", random_tensor({3}, rng, 0.1));
    const Tensor input = random_tensor({4, 6}, rng);
    auto loss = [&](const ParamMap& p) {
        Tape t;
        const int h = t.tanh(t.bias_add(t.matmul(t.constant(input), t.param("w1", p.at("w1"))), t.param("b1", p.at("b1"))));
        const int out = t.bias_add(t.matmul(h, t.param("w2", p.at("w2"))), t.param("b2", p.at("b2")));
        return t.value(t.mean_all(t.mul(out, out))).data[0];
    };
    Tape t;
    const int h =
        t.tanh(t.bias_add(t.matmul(t.constant(input), t.param("w1", params.at("w1"))), t.param("b1", params.at("b1"))));
    const int out = t.bias_add(t.matmul(h, t.param("w2", params.at("w2"))), t.param("b2", params.at("b2")));
    const auto grads = t.backward(t.mean_all(t.mul(out, out)));
    const auto report = test::fd_compare(loss, params, grads, 25, rng);
    CHECK(report.checked >= 100);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("gradient of composed ops equals chain rule on random 3-op chains") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        const Tensor x0 = random_tensor({3, 4}, rng, 0.8);
        ParamMap params;
        params.emplace("x", x0);
        [[maybe_unused]] auto loss = [&](const ParamMap& p) {
            Tape t;
            const int x = t.param("x", p.at("x"));
            return t.value(t.mean_all(t.gelu(t.tanh(t.scalar_mul(x, 1.3))))).data[0];
        };
        Tape t;
        const int x = t.param("x", params.at("x"));
        const auto grads = t.backward(t.mean_all(t.gelu(t.tanh(t.scalar_mul(x, 1.3)))));
        // Chain rule by hand: d mean(gelu(tanh(1.3 x)))/dx.
        const std::size_t n = x0.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const double u = 1.3 * x0.data[i];
            const double th = std::tanh(u);
            const double cdf = 0.5 * (1.0 + std::erf(th / std::sqrt(2.0)));
            const double pdf = std::exp(-0.5 * th * th) / std::sqrt(2.0 * M_PI);
            const double manual = (cdf + th * pdf) * (1.0 - th * th) * 1.3 / static_cast<double>(n);
            CHECK(grads.at("x").data[i] == doctest::Approx(manual).epsilon(1e-10));
        }
    }
}

TEST_CASE("identical tape and inputs give bit-identical outputs and gradients") {
    Rng rng(3);
    const Tensor a = random_tensor({4, 4}, rng);
    const Tensor b = random_tensor({4, 4}, rng);
    auto run = [&]() {
        Tape t;
        const int pa = t.param("a", a);
        const int pb = t.param("b", b);
        const int node = t.mean_all(t.softmax_last(t.matmul(pa, pb)));
        auto grads = t.backward(node);
        return std::make_pair(t.value(node).data[0], grads);
    };
    const auto [v1, g1] = run();
    const auto [v2, g2] = run();
    CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
    for (const auto& [name, g] : g1) {
        const auto& other = g2.at(name);
        CHECK(std::memcmp(g.data.data(), other.data.data(), g.data.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("shape mismatch is rejected with the offending op index") {
    Tape t;
    const int a = t.constant(Tensor({2, 3}));
    const int b = t.constant(Tensor({3, 3}));
    CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("at node 2"), DataError);
}

TEST_CASE("non-finite intermediates are rejected") {
    Tape t;
    const int big = t.constant(Tensor({1, 2}, {800.0, 800.0}));
    CHECK_THROWS_AS(t.exp(big), NumericError);
}

TEST_CASE("backward seed shape is validated") {
    Tape t;
    const int x = t.param("x", Tensor({2, 2}, {1, 2, 3, 4}));
    const int y = t.scalar_mul(x, 2.0);
    CHECK_THROWS_AS(t.backward(y, Tensor::scalar(1.0)), DataError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged while moments decay") {
    ParamMap params;
    params.emplace("w", Tensor({2}, {1.0, -2.0}));
    ParamMap grads;
    grads.emplace("w", Tensor({2}));
    AdamState state;
    AdamConfig cfg;
    CHECK(adam_step(params, grads, state, cfg) == AdamResult::kApplied);
    CHECK(params.at("w").data[0] == doctest::Approx(1.0));
    CHECK(params.at("w").data[1] == doctest::Approx(-2.0));
    CHECK(state.step == 1);
}

TEST_CASE("adam: first step from zero state on unit gradient equals -lr") {
    ParamMap params;
    params.emplace("w", Tensor({1}, {0.5}));
    ParamMap grads;
    grads.emplace("w", Tensor({1}, {1.0}));
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 1e-3;
    adam_step(params, grads, state, cfg);
    CHECK(params.at("w").data[0] == doctest::Approx(0.5 - 1e-3).epsilon(1e-6));
}

TEST_CASE("adam: constant gradient drives update magnitude toward lr * sign(g)") {
    ParamMap params;
    params.emplace("w", Tensor({1}, {0.0}));
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 1e-2;
    ParamMap grads;
    grads.emplace("w", Tensor({1}, {-3.0}));
    double prev = params.at("w").data[0];
    double last_update = 0.0;
    for (int i = 0; i < 500; ++i) {
        adam_step(params, grads, state, cfg);
        last_update = params.at("w").data[0] - prev;
        prev = params.at("w").data[0];
    }
    CHECK(last_update == doctest::Approx(cfg.lr).epsilon(1e-3));  // g < 0 so the step is +lr
}

TEST_CASE("adam: non-finite gradient rejects the step and leaves state untouched") {
    ParamMap params;
    params.emplace("w", Tensor({1}, {1.0}));
    ParamMap grads;
    grads.emplace("w", Tensor({1}, {std::nan("")}));
    AdamState state;
    AdamConfig cfg;
    CHECK(adam_step(params, grads, state, cfg) == AdamResult::kRejectedNonFinite);
    CHECK(params.at("w").data[0] == 1.0);
    CHECK(state.step == 0);
    CHECK(state.first_moment.empty());
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(99);
    ParamMap params;
    params.emplace("alpha.w", random_tensor({3, 4}, rng));
    params.emplace("beta", random_tensor({7}, rng));
    params.emplace("gamma.bias", random_tensor({1}, rng));

    const std::string dir = (std::filesystem::temp_directory_path() / "psrlab_ckpt_test").string();
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/test.ckpt";
    save_checkpoint(path, params);
    const ParamMap loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == params.size());
    for (const auto& [name, t] : params) {
        const auto& l = loaded.at(name);
        REQUIRE(l.shape == t.shape);
        CHECK(std::memcmp(l.data.data(), t.data.data(), t.data.size() * sizeof(double)) == 0);
    }
    // Saving the loaded map reproduces the file byte-for-byte.
    const std::string path2 = dir + "/test2.ckpt";
    save_checkpoint(path2, loaded);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove_all(dir);
}
