// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "bidora/bilevel.hpp"
#include "bidora/oracles.hpp"
#include "oracles.hpp"

using namespace bidora;

namespace {

struct SmallRun {
    ClusterTask task;
    AdapterModel model;
    SplitPair splits;
};

SmallRun make_small_run(std::uint64_t seed, AdapterMode mode = AdapterMode::dora) {
    SmallRun r;
    r.task = make_cluster_task(2, 4, 200, 60, 1.0, 0.0, seed);
    auto base = pretrain_base(default_model_shape(4, 2, 8, 1),
                              r.task.pretrain, 50, seed);
    r.model = make_adapter_model(base, TaskKind::classification, 2, 4.0, mode,
                                 seed + 1);
    r.splits = split(r.task.target, 0.8, seed + 2);
    return r;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& ps) {
    std::vector<std::vector<double>> out;
    for (const auto& p : ps) out.push_back(p.data());
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    BilevelConfig cfg;
    REQUIRE_NOTHROW(cfg.validate());
    cfg.split_ratio = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.split_ratio = 0.8;
    cfg.eps0 = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.eps0 = 0.01;
    cfg.gamma = -1.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.gamma = 0.0;
    cfg.lower_lr = -1.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("sgd on a scalar quadratic with lr=1 jumps to the minimum") {
    Tensor v = Tensor::scalar(0.0, true);
    Tensor loss = scale(hadamard(sub(v, Tensor::scalar(3.0)),
                                 sub(v, Tensor::scalar(3.0))), 0.5);
    loss.backward();
    std::vector<Tensor> params{v};
    detail::sgd_step(params, 1.0);
    REQUIRE(v.data()[0] == 3.0);
}

TEST_CASE("hypergradient vanishes when the validation loss is flat") {
    Tensor v = Tensor::scalar(2.0, true);
    Tensor m = Tensor::scalar(1.0, true);
    std::vector<Tensor> lower{v}, upper{m};
    auto loss_tr = [&] {
        return scale(frobenius_norm_sq(sub(v, m)), 0.5);
    };
    auto loss_val = [&] { return scale(sum(v), 0.0); };
    auto hg = hypergradient(lower, upper, loss_tr, loss_val, 0.1, 0.01);
    REQUIRE(hg[0][0] == 0.0);
}

TEST_CASE("scalar quadratic oracle: estimate 0.1, exact 1.0, cosine 1") {
    // L_tr = 1/2 (v - c m)^2, L_val = 1/2 (v - t)^2, at the inner optimum
    // v = c m with c=1, m=2, t=1, xi=0.1.
    const double c = 1.0, t = 1.0, xi = 0.1;
    Tensor v = Tensor::scalar(2.0, true);
    Tensor m = Tensor::scalar(2.0, true);
    std::vector<Tensor> lower{v}, upper{m};
    auto loss_tr = [&] {
        return scale(frobenius_norm_sq(sub(v, scale(m, c))), 0.5);
    };
    auto loss_val = [&] {
        return scale(frobenius_norm_sq(sub(v, Tensor::scalar(t))), 0.5);
    };
    auto terms = hypergradient_terms(lower, upper, loss_tr, loss_val, xi, 0.01);
    const double estimate = terms.direct[0][0] - xi * terms.curvature[0][0];
    REQUIRE_THAT(estimate, Catch::Matchers::WithinAbs(0.1, 1e-10));

    // The mixed Hessian is constant here, so the central difference is exact:
    // the curvature term equals -c * (vbar - t) with vbar = v at the optimum.
    const double vbar = v.data()[0];  // grad_v L_tr = 0 at the optimum
    REQUIRE_THAT(terms.curvature[0][0],
                 Catch::Matchers::WithinAbs(-c * (vbar - t), 1e-10));

    QuadraticBilevelProblem prob{Tensor::scalar(c), Tensor::scalar(t)};
    auto exact = exact_hypergradient_oracle(prob, Tensor::scalar(2.0));
    REQUIRE_THAT(exact[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE(testor::cosine({estimate}, exact) == 1.0);
}

TEST_CASE("exact hypergradient oracle trivial cases") {
    // v*(m) = m, so d/dm L_val = m - 1 = 1 at m = 2.
    QuadraticBilevelProblem scalar{Tensor::scalar(1.0), Tensor::scalar(1.0)};
    REQUIRE(exact_hypergradient_oracle(scalar, Tensor::scalar(2.0))[0] == 1.0);

    // C = I: exact hypergradient is M - t.
    QuadraticBilevelProblem identity{Tensor::identity(3),
                                     Tensor(3, 1, {0.5, -1.0, 2.0})};
    Tensor m_vec(3, 1, {1.0, 1.0, 1.0});
    auto hg = exact_hypergradient_oracle(identity, m_vec);
    REQUIRE_THAT(hg[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE_THAT(hg[1], Catch::Matchers::WithinAbs(2.0, 1e-12));
    REQUIRE_THAT(hg[2], Catch::Matchers::WithinAbs(-1.0, 1e-12));
}

TEST_CASE("multivariate quadratic: estimator aligns with the exact gradient") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        QuadraticBilevelProblem prob;
        prob.C = random_normal(4, 3, 0.0, 1.0, rng);
        prob.t = random_normal(4, 1, 0.0, 1.0, rng);
        Tensor m_vec = random_normal(3, 1, 0.0, 1.0, rng);
        m_vec.set_requires_grad(true);
        Tensor v = prob.inner_optimum(m_vec).detach();
        v.set_requires_grad(true);
        std::vector<Tensor> lower{v}, upper{m_vec};
        auto hg = hypergradient(
            lower, upper, [&] { return prob.loss_tr(v, m_vec); },
            [&] { return prob.loss_val(v); }, 0.1, 0.01);
        auto exact = exact_hypergradient_oracle(prob, m_vec);
        REQUIRE(testor::cosine(hg[0], exact) > 1.0 - 1e-8);
        // Positive multiple: projection onto the exact direction is positive.
        double dot = 0.0;
        for (std::size_t i = 0; i < exact.size(); ++i) dot += hg[0][i] * exact[i];
        REQUIRE(dot > 0.0);
    }
}

TEST_CASE("lower parameters are restored bit-exactly by hypergradient") {
    std::mt19937_64 rng(77);
    QuadraticBilevelProblem prob;
    prob.C = random_normal(5, 4, 0.0, 1.0, rng);
    prob.t = random_normal(5, 1, 0.0, 1.0, rng);
    Tensor m_vec = random_normal(4, 1, 0.0, 1.0, rng);
    m_vec.set_requires_grad(true);
    Tensor v = random_normal(5, 1, 0.0, 1.0, rng);  // away from the optimum
    v.set_requires_grad(true);
    const std::vector<double> before = v.data();
    std::vector<Tensor> lower{v}, upper{m_vec};
    hypergradient(lower, upper, [&] { return prob.loss_tr(v, m_vec); },
                  [&] { return prob.loss_val(v); }, 0.1, 0.01);
    REQUIRE(v.data() == before);
}

TEST_CASE("xi_zero collapses the curvature term and the unroll") {
    Tensor v = Tensor::scalar(2.0, true);
    Tensor m = Tensor::scalar(3.0, true);
    std::vector<Tensor> lower{v}, upper{m};
    auto loss_tr = [&] { return scale(frobenius_norm_sq(sub(v, m)), 0.5); };
    auto loss_val = [&] {
        return scale(frobenius_norm_sq(sub(hadamard(v, m),
                                           Tensor::scalar(1.0))), 0.5);
    };
    auto terms = hypergradient_terms(lower, upper, loss_tr, loss_val, 0.0, 0.01);
    REQUIRE(terms.probe_eps == 0.0);
    REQUIRE(terms.curvature[0][0] == 0.0);
    // Direct term is the plain validation gradient at V (no unroll applied).
    v.zero_grad();
    m.zero_grad();
    Tensor l = loss_val();
    l.backward();
    REQUIRE(terms.direct[0][0] == m.grad()[0]);
}

TEST_CASE("quartic inner loss: halving eps0 quarters the probe error") {
    auto errs = oracle_quartic_eps_errors(7, {0.02, 0.01, 0.005, 0.0025});
    REQUIRE(errs.size() == 4);
    for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
        const double ratio = errs[i] / errs[i + 1];
        REQUIRE(ratio > 3.5);
        REQUIRE(ratio < 4.5);
    }
}

TEST_CASE("packaged oracle batteries all pass") {
    auto checks = run_oracle_checks(1234);
    for (const auto& c : checks) {
        INFO(c.name << ": measured " << c.measured << " vs " << c.threshold);
        REQUIRE(c.pass);
    }
}

TEST_CASE("alternating steps drive M toward the bilevel optimum") {
    // c = 1, t = 1: the outer objective 1/2 (c m - t)^2 is minimized at m = 1.
    Tensor v = Tensor::scalar(0.0, true);
    Tensor m = Tensor::scalar(2.0, true);
    std::vector<Tensor> lower{v}, upper{m};
    auto loss_tr = [&] { return scale(frobenius_norm_sq(sub(v, m)), 0.5); };
    auto loss_val = [&] {
        return scale(frobenius_norm_sq(sub(v, Tensor::scalar(1.0))), 0.5);
    };
    std::vector<double> dist;
    for (int step = 0; step < 300; ++step) {
        auto hg = hypergradient(lower, upper, loss_tr, loss_val, 0.1, 0.01);
        m.mutable_data()[0] -= 0.5 * hg[0][0];
        v.zero_grad();
        m.zero_grad();
        Tensor l = loss_tr();
        l.backward();
        v.mutable_data()[0] -= 0.5 * v.grad()[0];
        if (step % 50 == 49) dist.push_back(std::abs(m.data()[0] - 1.0));
    }
    for (std::size_t i = 0; i + 1 < dist.size(); ++i)
        REQUIRE(dist[i + 1] < dist[i]);
    REQUIRE(dist.back() < 0.05);
}

TEST_CASE("upper steps never touch directions, lower steps never touch m") {
    SmallRun r = make_small_run(11);
    BilevelConfig cfg;
    cfg.seed = 11;
    cfg.batch_size = 16;
    BilevelTrainer trainer(r.model, cfg);
    for (int i = 0; i < 5; ++i) {
        auto lower_before = snapshot(trainer.lower_params());
        auto upper_before = snapshot(trainer.upper_params());
        trainer.upper_step(r.splits.train, r.splits.val);
        REQUIRE(snapshot(trainer.lower_params()) == lower_before);
        REQUIRE(snapshot(trainer.upper_params()) != upper_before);

        upper_before = snapshot(trainer.upper_params());
        trainer.lower_step(r.splits.train);
        REQUIRE(snapshot(trainer.upper_params()) == upper_before);
    }
    // Directions do move under lower steps once gradients flow.
    auto lower_before = snapshot(trainer.lower_params());
    trainer.lower_step(r.splits.train);
    REQUIRE(snapshot(trainer.lower_params()) != lower_before);
}

TEST_CASE("training loss includes the regularizer except in no_reg mode") {
    SmallRun r = make_small_run(13);
    BilevelConfig cfg;
    cfg.gamma = 0.1;  // large enough to be visible
    BilevelTrainer full(r.model, cfg);
    const double with_reg = full.training_loss(r.splits.train).detach().item();
    const double plain = r.model.task_loss(r.splits.train).detach().item();
    REQUIRE(with_reg > plain);
    const double reg = gram_regularizer(r.model.layers).detach().item();
    REQUIRE_THAT(with_reg - plain,
                 Catch::Matchers::WithinRel(cfg.gamma * reg, 1e-9));

    cfg.mode = BilevelMode::no_reg;
    BilevelTrainer ablated(r.model, cfg);
    REQUIRE(ablated.training_loss(r.splits.train).detach().item() == plain);
}

TEST_CASE("no_retrain mode skips the retraining phase") {
    SmallRun r = make_small_run(17);
    BilevelConfig cfg;
    cfg.mode = BilevelMode::no_retrain;
    cfg.search_steps = 20;
    cfg.retrain_steps = 20;
    cfg.eval_every = 10;
    cfg.batch_size = 16;
    cfg.seed = 17;
    BilevelTrainer trainer(r.model, cfg);
    trainer.run(r.splits, &r.task.test);
    REQUIRE_FALSE(trainer.log().empty());
    for (const auto& rec : trainer.log()) REQUIRE(rec.phase == "search");
}

TEST_CASE("retrain_magnitude freezes directions during retraining") {
    SmallRun r = make_small_run(19);
    BilevelConfig cfg;
    cfg.mode = BilevelMode::retrain_magnitude;
    cfg.search_steps = 10;
    cfg.retrain_steps = 20;
    cfg.eval_every = 10;
    cfg.batch_size = 16;
    cfg.seed = 19;
    BilevelTrainer trainer(r.model, cfg);
    trainer.search_phase(r.splits.train, r.splits.val);
    auto dirs_before = snapshot(trainer.lower_params());
    auto mags_before = snapshot(trainer.upper_params());
    trainer.retrain_phase(Dataset::concat(r.splits.train, r.splits.val));
    REQUIRE(snapshot(trainer.lower_params()) == dirs_before);
    REQUIRE(snapshot(trainer.upper_params()) != mags_before);
}

TEST_CASE("full runs are deterministic given the seed") {
    auto run_once = [] {
        SmallRun r = make_small_run(23);
        BilevelConfig cfg;
        cfg.search_steps = 30;
        cfg.retrain_steps = 30;
        cfg.eval_every = 10;
        cfg.batch_size = 16;
        cfg.seed = 23;
        BilevelTrainer trainer(r.model, cfg);
        trainer.run(r.splits, &r.task.test);
        std::vector<double> fingerprint;
        for (const auto& rec : trainer.log()) {
            fingerprint.push_back(rec.loss_tr);
            fingerprint.push_back(rec.metric);
        }
        for (const auto& p : trainer.upper_params())
            for (double x : p.data()) fingerprint.push_back(x);
        for (const auto& p : trainer.lower_params())
            for (double x : p.data()) fingerprint.push_back(x);
        return fingerprint;
    };
    REQUIRE(run_once() == run_once());
}

TEST_CASE("search phase logs outer metrics and eval snapshots") {
    SmallRun r = make_small_run(29);
    BilevelConfig cfg;
    cfg.search_steps = 20;
    cfg.eval_every = 5;
    cfg.batch_size = 16;
    cfg.seed = 29;
    BilevelTrainer trainer(r.model, cfg);
    trainer.search_phase(r.splits.train, r.splits.val);
    std::size_t evals = 0, outers = 0;
    for (const auto& rec : trainer.log()) {
        if (rec.has_eval) {
            ++evals;
            REQUIRE_FALSE(rec.wda.empty());
        }
        if (rec.has_outer) ++outers;
    }
    REQUIRE(evals >= 4);
    REQUIRE(outers == trainer.log().size());  // upper loop active every step
}

TEST_CASE("single-loop baseline trains and logs in one phase") {
    SmallRun r = make_small_run(31, AdapterMode::dora);
    BilevelConfig cfg;
    cfg.search_steps = 40;
    cfg.eval_every = 10;
    cfg.batch_size = 16;
    cfg.seed = 31;
    auto log = single_loop_train(r.model, r.task.target, cfg, &r.task.test);
    REQUIRE(log.size() == 40);
    for (const auto& rec : log) REQUIRE(rec.phase == "search");
    REQUIRE(log.back().loss_tr < log.front().loss_tr);
}
