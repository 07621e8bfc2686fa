#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nervdiff/random.hpp"
#include "nervdiff/sched_math.hpp"

#include <cmath>

using namespace nervdiff;

namespace {

// Independent high-precision recomputation of the linear-beta schedule.
long double linear_beta_alpha_bar(Index num_steps, Index t) {
    long double abar = 1.0L;
    for (Index i = 0; i < t; ++i) {
        long double beta =
            1e-4L + (0.02L - 1e-4L) * static_cast<long double>(i) / static_cast<long double>(num_steps - 1);
        abar *= 1.0L - beta;
    }
    return abar;
}

}  // namespace

TEST_CASE("build_schedule rejects num_steps < 2") {
    CHECK_THROWS_AS(build_schedule(1, ScheduleKind::linear_beta), std::invalid_argument);
    CHECK_NOTHROW(build_schedule(2, ScheduleKind::linear_beta));
}

TEST_CASE("linear_beta matches high-precision cumulative product oracle") {
    auto sch = build_schedule(1000, ScheduleKind::linear_beta);
    CHECK(sch.alpha_at(1) == doctest::Approx(std::sqrt(1.0 - 1e-4)).epsilon(1e-12));
    for (Index t : {Index(1), Index(10), Index(250), Index(500), Index(999), Index(1000)}) {
        long double abar = linear_beta_alpha_bar(1000, t);
        CHECK(std::abs(sch.alpha_at(t) - std::sqrt(static_cast<double>(abar))) /
                  std::sqrt(static_cast<double>(abar)) <
              1e-9);
        double snr_oracle = static_cast<double>(abar / (1.0L - abar));
        CHECK(std::abs(snr(sch, t) - snr_oracle) / snr_oracle < 1e-9);
    }
}

TEST_CASE("minimal 2-step schedule is monotone") {
    auto sch = build_schedule(2, ScheduleKind::linear_beta);
    CHECK(sch.alpha.size() == 2);
    CHECK(sch.alpha[0] > sch.alpha[1]);
    CHECK(sch.sigma[0] < sch.sigma[1]);
}

TEST_CASE("schedules are variance preserving and monotone") {
    for (auto kind : {ScheduleKind::linear_beta, ScheduleKind::cosine}) {
        auto sch = build_schedule(1000, kind);
        for (Index t = 1; t <= 1000; ++t) {
            double a = sch.alpha_at(t), s = sch.sigma_at(t);
            CHECK(std::abs(a * a + s * s - 1.0) < 1e-6);
            CHECK(a > 0.0);
            CHECK(a <= 1.0);
            CHECK(s >= 0.0);
            CHECK(s < 1.0);
            if (t > 1) {
                CHECK(sch.alpha_at(t) < sch.alpha_at(t - 1));
                CHECK(sch.sigma_at(t) > sch.sigma_at(t - 1));
                CHECK(snr(sch, t) < snr(sch, t - 1));
            }
        }
    }
}

TEST_CASE("snr rejects out-of-range t and guards overflow") {
    auto sch = build_schedule(10, ScheduleKind::linear_beta);
    CHECK_THROWS_AS(snr(sch, 0), std::out_of_range);
    CHECK_THROWS_AS(snr(sch, 11), std::out_of_range);

    DiffusionSchedule manual;
    manual.num_steps = 2;
    manual.alpha = {1.0, std::sqrt(0.5)};
    manual.sigma = {0.0, std::sqrt(0.5)};
    CHECK(std::isfinite(snr(manual, 1)));  // sigma=0 clamped below at 1e-12
    CHECK(snr(manual, 1) > 1e20);
    CHECK(snr(manual, 2) == doctest::Approx(1.0));
}

TEST_CASE("min_snr_weight semantics") {
    // SNR(1)=10 and SNR(2)=1 by construction
    DiffusionSchedule sch;
    sch.num_steps = 2;
    sch.alpha = {std::sqrt(10.0 / 11.0), std::sqrt(0.5)};
    sch.sigma = {std::sqrt(1.0 / 11.0), std::sqrt(0.5)};
    CHECK(min_snr_weight(sch, 1, 5.0, PredictionTarget::x0) == doctest::Approx(5.0));
    CHECK(min_snr_weight(sch, 1, 5.0, PredictionTarget::epsilon) == doctest::Approx(0.5));
    CHECK(min_snr_weight(sch, 2, 5.0, PredictionTarget::epsilon) == doctest::Approx(1.0));
    CHECK_THROWS_AS(min_snr_weight(sch, 1, 0.0, PredictionTarget::x0), std::invalid_argument);

    // gamma -> infinity reduces the epsilon weight to exactly 1
    auto built = build_schedule(100, ScheduleKind::linear_beta);
    for (Index t = 1; t <= 100; ++t)
        CHECK(min_snr_weight(built, t, std::numeric_limits<double>::infinity(),
                             PredictionTarget::epsilon) == 1.0);
}

TEST_CASE("min_snr_weight cap property") {
    for (auto kind : {ScheduleKind::linear_beta, ScheduleKind::cosine}) {
        auto sch = build_schedule(500, kind);
        for (Index t = 1; t <= 500; ++t) {
            double wx = min_snr_weight(sch, t, 5.0, PredictionTarget::x0);
            double we = min_snr_weight(sch, t, 5.0, PredictionTarget::epsilon);
            CHECK(wx > 0.0);
            CHECK(wx <= 5.0);
            CHECK(we > 0.0);
            CHECK(we <= 1.0);
        }
    }
}

TEST_CASE("kl closed form basics") {
    Tensor<float> mean = Tensor<float>::zeros({4, 4});
    Tensor<float> logvar = Tensor<float>::zeros({4, 4});
    CHECK(kl_to_standard_normal(mean, logvar) == doctest::Approx(0.0));

    Tensor<float> m1 = Tensor<float>::full({1}, 1.0f);
    Tensor<float> lv0 = Tensor<float>::zeros({1});
    CHECK(kl_to_standard_normal(m1, lv0) == doctest::Approx(0.5));

    CHECK_THROWS_AS(kl_to_standard_normal(m1, Tensor<float>::zeros({2})), std::invalid_argument);
    Tensor<float> bad = Tensor<float>::full({1}, std::numeric_limits<float>::infinity());
    CHECK_THROWS_AS(kl_to_standard_normal(bad, lv0), std::invalid_argument);
}

TEST_CASE("kl matches Monte-Carlo oracle within 1%") {
    RngStream rng(101);
    Tensor<double> mean = rng.normal_tensor<double>({4}, 0.8);
    Tensor<double> logvar = rng.normal_tensor<double>({4}, 0.4);
    double formula = kl_to_standard_normal(mean, logvar);

    const int n = 1000000;
    double acc = 0.0;
    for (Index j = 0; j < 4; ++j) {
        double mu = mean[j], lv = logvar[j], sd = std::exp(0.5 * lv);
        double s = 0.0;
        for (int i = 0; i < n / 4; ++i) {
            double x = mu + sd * rng.normal();
            double logq = -0.5 * lv - (x - mu) * (x - mu) / (2.0 * std::exp(lv));
            double logp = -0.5 * x * x;
            s += logq - logp;
        }
        acc += s / (n / 4);
    }
    double mc = acc / 4.0;
    CHECK(std::abs(mc - formula) / formula < 0.01);
}

TEST_CASE("kl nonnegativity with equality iff standard normal") {
    RngStream rng(7);
    for (int i = 0; i < 50; ++i) {
        Tensor<double> mean = rng.normal_tensor<double>({8}, 1.0);
        Tensor<double> logvar = rng.normal_tensor<double>({8}, 1.0);
        CHECK(kl_to_standard_normal(mean, logvar) >= 0.0);
        CHECK(kl_to_standard_normal(mean, logvar) > 0.0);
    }
    CHECK(kl_to_standard_normal(Tensor<double>::zeros({8}), Tensor<double>::zeros({8})) == 0.0);
}

TEST_CASE("pe3d shape and range") {
    std::vector<double> times;
    for (int k = 0; k < 16; ++k) times.push_back(k);
    auto pe = build_pe3d({16, 16, 16}, 8, 8, times);
    CHECK(pe.values.shape() == Shape{8, 8, 16, 48});
    for (Index i = 0; i < pe.values.size(); ++i) {
        CHECK(pe.values[i] >= -1.0f);
        CHECK(pe.values[i] <= 1.0f);
    }
    auto q = pe3d_to_queries(pe);
    CHECK(q.shape() == Shape{16, 48, 8, 8});
    // transpose is a pure relabeling
    CHECK(q.at({3, 5, 2, 7}) == pe.values.at({2, 7, 3, 5}));
}

TEST_CASE("pe3d rejects odd dims") {
    CHECK_THROWS_AS(build_pe3d({15, 16, 16}, 4, 4, {0.0}), std::invalid_argument);
}

TEST_CASE("pe3d equal time offsets give identical time slices") {
    auto pe = build_pe3d({8, 8, 8}, 4, 4, {2.5, 2.5, 2.5});
    for (Index y = 0; y < 4; ++y)
        for (Index x = 0; x < 4; ++x)
            for (Index d = 0; d < 24; ++d) {
                float v0 = pe.values.at({y, x, 0, d});
                CHECK(pe.values.at({y, x, 1, d}) == v0);
                CHECK(pe.values.at({y, x, 2, d}) == v0);
            }
}

TEST_CASE("pe3d fractional time lies between integer neighbors in each sin/cos argument") {
    auto p0 = build_pe3d({16, 8, 8}, 2, 2, {0.0});
    auto ph = build_pe3d({16, 8, 8}, 2, 2, {0.5});
    auto p1 = build_pe3d({16, 8, 8}, 2, 2, {1.0});
    // the phase t*freq at t=0.5 is strictly between the phases at t=0 and t=1
    for (Index j = 0; j < 8; ++j) {
        double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / 16.0);
        CHECK(0.5 * freq > 0.0 * freq);
        CHECK(0.5 * freq < 1.0 * freq);
    }
    // embedded values stay inside the neighbor envelope; strict where float32
    // resolution allows (the full-rate sin component)
    for (Index d = 0; d < 16; ++d) {
        float lo = std::min(p0.values.at({0, 0, 0, d}), p1.values.at({0, 0, 0, d}));
        float hi = std::max(p0.values.at({0, 0, 0, d}), p1.values.at({0, 0, 0, d}));
        float mid = ph.values.at({0, 0, 0, d});
        CHECK(mid >= lo);
        CHECK(mid <= hi);
    }
    CHECK(ph.values.at({0, 0, 0, 0}) > p0.values.at({0, 0, 0, 0}));
    CHECK(ph.values.at({0, 0, 0, 0}) < p1.values.at({0, 0, 0, 0}));
}

TEST_CASE("pe3d extrapolation consistency on shared prefix") {
    std::vector<double> t8, t16;
    for (int k = 0; k < 8; ++k) t8.push_back(k);
    for (int k = 0; k < 16; ++k) t16.push_back(k);
    auto a = build_pe3d({8, 8, 8}, 4, 4, t8);
    auto b = build_pe3d({8, 8, 8}, 4, 4, t16);
    for (Index y = 0; y < 4; ++y)
        for (Index x = 0; x < 4; ++x)
            for (Index k = 0; k < 8; ++k)
                for (Index d = 0; d < 24; ++d)
                    CHECK(a.values.at({y, x, k, d}) == b.values.at({y, x, k, d}));
}
