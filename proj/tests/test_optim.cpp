#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mspf/optim.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

using namespace mspf;

namespace {

ModelConfig unit_cfg() {
    ModelConfig cfg;
    cfg.stage_dims = {4, 8, 16, 32};
    cfg.encoder_depths = {1, 1, 1, 1};
    cfg.decoder_depths = {1, 1, 1};
    cfg.r1 = {2, 2, 2, 1};
    cfg.r2 = {1, 1, 1, 1};
    cfg.refine_depth = 1;
    cfg.refine_r1 = 2;
    cfg.refine_r2 = 1;
    cfg.expansion = 1;
    cfg.size_multiple = 16;
    return cfg;
}

template <typename T>
Tensor<T> random_tensor(std::vector<int64_t> shape, uint64_t seed) {
    Rng rng(seed);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = T(rng.uniform(-1.0, 1.0));
    return t;
}

// Backward pass whose parameter gradients are all zero except the chosen
// parameter, which receives grad_value on every element.
template <typename T>
void seed_grads(Model<T>& model, const std::string& chosen, double grad_value) {
    mark_trainable(model);
    Tensor<T> x = random_tensor<T>({1, 3, 16, 16}, 5);
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> y = forward(model, x);
    Tensor<T> loss = mean(scale(y, T(0)));
    for (auto& [name, p] : collect_params(model)) {
        if (name != chosen) continue;
        Tensor<T> c = Tensor<T>::full(p.shape(), T(grad_value * double(p.numel())));
        loss = add(loss, mean(mul(p, c)));
    }
    tape.backward(loss);
}

template <typename T>
std::vector<T> snapshot(Model<T>& model) {
    std::vector<T> out;
    visit_params(model, [&](const std::string&, Tensor<T>& p) {
        out.insert(out.end(), p.cdata(), p.cdata() + p.numel());
    });
    return out;
}

}  // namespace

TEST_CASE("charbonnier of identical inputs is exactly eps in both precisions") {
    auto xd = random_tensor<double>({2, 3, 5, 7}, 1);
    CHECK(charbonnier(xd, xd).cdata()[0] == 1e-3);
    auto xf = random_tensor<float>({2, 3, 5, 7}, 2);
    CHECK(charbonnier(xf, xf).cdata()[0] == 1e-3f);
    CHECK(charbonnier(xd, xd, 5e-2).cdata()[0] == 5e-2);
}

TEST_CASE("charbonnier matches the closed form for a uniform residual") {
    auto x = Tensor<double>::full({1, 3, 4, 4}, 0.5);
    auto y = Tensor<double>::full({1, 3, 4, 4}, 0.5 + 3e-3);
    const double want = std::sqrt(9e-6 + 1e-6);
    CHECK(charbonnier(x, y).cdata()[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("charbonnier validates its contract") {
    auto x = random_tensor<double>({1, 3, 4, 4}, 3);
    auto y = random_tensor<double>({1, 3, 4, 5}, 4);
    CHECK_THROWS_AS(charbonnier(x, y), ShapeError);
    CHECK_THROWS_AS(charbonnier(x, x, 0.0), ContractError);
    CHECK_THROWS_AS(charbonnier(x, x, -1.0), ContractError);
}

TEST_CASE("charbonnier gradients match finite differences") {
    auto op = [](const auto& xs) {
        using U = typename std::decay_t<decltype(xs[0])>::value_type;
        return charbonnier(xs[0], xs[1], 1e-2);
    };
    std::vector<Tensor<double>> in{random_tensor<double>({1, 2, 3, 3}, 6),
                                   random_tensor<double>({1, 2, 3, 3}, 7)};
    const auto rep = finite_diff_check(op, in, 1e-6, 1e-6);
    CHECK(rep.pass);
    std::vector<Tensor<float>> inf{random_tensor<float>({1, 2, 3, 3}, 8),
                                   random_tensor<float>({1, 2, 3, 3}, 9)};
    const auto repf = finite_diff_check(op, inf, 1e-3, 1e-4);
    CHECK(repf.pass);
}

TEST_CASE("learning rate holds then decays linearly to zero") {
    Schedule s;
    s.lr0 = 7e-4;
    s.hold_epochs = 250;
    s.total_epochs = 600;
    CHECK(lr_at(0, s) == 7e-4);
    CHECK(lr_at(249, s) == 7e-4);
    CHECK(lr_at(250, s) == 7e-4);
    CHECK(lr_at(425, s) == doctest::Approx(3.5e-4).epsilon(1e-12));
    CHECK(lr_at(600, s) == 0.0);
    CHECK_THROWS_AS(lr_at(-1, s), DomainError);
    CHECK_THROWS_AS(lr_at(601, s), DomainError);
    Schedule bad = s;
    bad.total_epochs = 250;
    CHECK_THROWS_AS(lr_at(0, bad), ConfigError);
    bad = s;
    bad.lr0 = 0;
    CHECK_THROWS_AS(lr_at(0, bad), ConfigError);
}

TEST_CASE("adamw with zero gradients and zero decay is an exact identity") {
    auto model = build_model<double>(unit_cfg(), 11);
    const auto before = snapshot(model);
    seed_grads(model, "", 0.0);
    auto st = init_optim(model);
    AdamWHyper hp;
    hp.weight_decay = 0.0;
    adamw_step(model, st, hp, 7e-4);
    const auto after = snapshot(model);
    CHECK(std::memcmp(before.data(), after.data(), sizeof(double) * before.size()) == 0);
    CHECK(st.t == 1);
}

TEST_CASE("decoupled weight decay shrinks parameters by lr * wd * p") {
    auto model = build_model<double>(unit_cfg(), 12);
    auto params = collect_params(model);
    const std::string target = "model.stem.b";
    for (auto& [name, p] : params)
        if (name == target) p.data()[0] = 1.0;
    seed_grads(model, "", 0.0);
    auto st = init_optim(model);
    AdamWHyper hp;
    hp.weight_decay = 5e-4;
    adamw_step(model, st, hp, 1e-3);
    for (auto& [name, p] : collect_params(model))
        if (name == target) CHECK(p.cdata()[0] == doctest::Approx(0.9999995).epsilon(1e-12));
}

TEST_CASE("adamw reproduces the reference two-step trajectory") {
    auto model = build_model<double>(unit_cfg(), 13);
    const std::string target = "model.head.b";
    const double g = 0.25;
    auto st = init_optim(model);
    AdamWHyper hp;  // defaults: beta 0.9/0.999, eps 1e-8, wd 5e-4
    const double lr = 7e-4;

    double ref = 0.0;  // head bias initializes to zero
    double m = 0.0, v = 0.0;
    for (int stepi = 1; stepi <= 2; ++stepi) {
        seed_grads(model, target, g);
        adamw_step(model, st, hp, lr);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, stepi));
        const double vhat = v / (1.0 - std::pow(0.999, stepi));
        ref -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + 5e-4 * ref);
    }
    CHECK(st.t == 2);
    for (auto& [name, p] : collect_params(model))
        if (name == target)
            for (int64_t i = 0; i < p.numel(); ++i)
                CHECK(p.cdata()[i] == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("adamw names the parameter carrying a non-finite gradient") {
    auto model = build_model<double>(unit_cfg(), 14);
    seed_grads(model, "model.stem.w", std::numeric_limits<double>::infinity());
    auto st = init_optim(model);
    try {
        adamw_step(model, st, AdamWHyper{}, 7e-4);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("model.stem.w") != std::string::npos);
    }
}

TEST_CASE("gradient clipping caps the global norm and is inert below it") {
    auto a = build_model<double>(unit_cfg(), 15);
    auto b = build_model<double>(unit_cfg(), 15);
    seed_grads(a, "model.head.b", 0.5);
    seed_grads(b, "model.head.b", 0.5);
    const double norm = grad_global_norm(a);
    CHECK(norm == doctest::Approx(0.5 * std::sqrt(3.0)).epsilon(1e-9));

    auto sa = init_optim(a);
    auto sb = init_optim(b);
    adamw_step(a, sa, AdamWHyper{}, 7e-4, /*clip_norm=*/norm * 2);
    adamw_step(b, sb, AdamWHyper{}, 7e-4, /*clip_norm=*/0.0);
    const auto va = snapshot(a);
    const auto vb = snapshot(b);
    CHECK(std::memcmp(va.data(), vb.data(), sizeof(double) * va.size()) == 0);

    auto c = build_model<double>(unit_cfg(), 15);
    seed_grads(c, "model.head.b", 0.5);
    auto sc = init_optim(c);
    adamw_step(c, sc, AdamWHyper{}, 7e-4, /*clip_norm=*/norm / 2);
    const auto vc = snapshot(c);
    CHECK_FALSE(std::memcmp(va.data(), vc.data(), sizeof(double) * va.size()) == 0);
}

TEST_CASE("optimizer hyperparameters and state are validated") {
    auto model = build_model<double>(unit_cfg(), 16);
    seed_grads(model, "", 0.0);
    auto st = init_optim(model);
    AdamWHyper bad;
    bad.beta1 = 1.0;
    CHECK_THROWS_AS(adamw_step(model, st, bad, 1e-3), ConfigError);
    bad = AdamWHyper{};
    bad.eps = 0.0;
    CHECK_THROWS_AS(adamw_step(model, st, bad, 1e-3), ConfigError);
    CHECK_THROWS_AS(adamw_step(model, st, AdamWHyper{}, -1.0), ContractError);
    st.m.pop_back();
    CHECK_THROWS_AS(adamw_step(model, st, AdamWHyper{}, 1e-3), ContractError);
}

TEST_CASE("optimizer state shapes mirror the parameters with zero moments") {
    auto model = build_model<float>(unit_cfg(), 17);
    auto st = init_optim(model);
    auto params = collect_params(model);
    REQUIRE(st.m.size() == params.size());
    REQUIRE(st.names.size() == params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        CHECK(st.names[i] == params[i].first);
        CHECK(st.m[i].shape() == params[i].second.shape());
        CHECK(st.v[i].shape() == params[i].second.shape());
        for (int64_t k = 0; k < st.m[i].numel(); ++k) {
            CHECK(st.m[i].cdata()[k] == 0.0f);
            CHECK(st.v[i].cdata()[k] == 0.0f);
        }
    }
}
