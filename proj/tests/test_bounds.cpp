#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "conserve/bounds.hpp"
#include "conserve/errors.hpp"

using namespace conserve;

namespace {

// Independent transcription of the closed form, kept separate from the
// production code on purpose.
double reference_bound(double C, double R, double zeta, int rho, double delta, int n,
                       int xi) {
    double log_terms = std::log(1.0 / delta);
    if (xi > 0) {
        double arg = 2.0 * R * std::pow(zeta, 1.0 - 1.0 / rho) * std::sqrt(double(n));
        log_terms += xi * std::log(std::max(std::sqrt(double(xi)), 1.0)) + xi * std::log(arg);
    }
    double value = C * std::sqrt(log_terms / (2.0 * n));
    if (xi >= 1) value += std::sqrt(std::pow(zeta, 2.0 / rho) / n);
    return value;
}

} // namespace

TEST_CASE("dimension-zero case collapses to the confidence term alone") {
    BoundInputs b; // C=1, delta=0.05, n=100, m=0, conserved
    double v = eval_bound(b);
    CHECK(v == doctest::Approx(std::sqrt(std::log(20.0) / 200.0)).epsilon(1e-12));
    CHECK(std::abs(v - 0.12239) < 1e-5);

    SUBCASE("closed form equals the general formula's xi = 0 limit exactly") {
        // The general formula with xi = 0 must drop every log term, not just
        // approach zero, independent of R and zeta.
        BoundInputs odd = b;
        odd.R = 1e-30; // would explode the log if the xi = 0 guard leaked
        odd.zeta = 1e-30;
        CHECK(eval_bound(odd) == v);
        BoundInputs big = b;
        big.R = 1e30;
        big.zeta = 1e30;
        CHECK(eval_bound(big) == v);
    }
    SUBCASE("indicator term vanishes at xi = 0 regardless of zeta") {
        BoundInputs z = b;
        z.zeta = 100.0;
        CHECK(eval_bound(z) == v);
    }
}

TEST_CASE("general formula matches an independent transcription") {
    for (double C : {0.5, 1.0, 2.0})
        for (double R : {0.75, 1.0, 3.0})
            for (double zeta : {0.5, 1.0, 2.5})
                for (int rho : {1, 2, 3})
                    for (int n : {10, 100, 1000})
                        for (int xi : {0, 1, 2, 4}) {
                            BoundInputs b;
                            b.C = C;
                            b.R = R;
                            b.zeta = zeta;
                            b.rho = rho;
                            b.n = n;
                            b.d = 4;
                            b.m = xi;
                            b.conserved = true;
                            double want = reference_bound(C, R, zeta, rho, b.delta, n, xi);
                            if (!std::isfinite(want)) continue;
                            CHECK(eval_bound(b) ==
                                  doctest::Approx(want).epsilon(1e-12));
                        }
}

TEST_CASE("conserved flag selects the effective dimension") {
    BoundInputs b;
    b.d = 5;
    b.m = 2;
    b.conserved = true;
    double with_m = eval_bound(b);
    b.conserved = false;
    double with_d = eval_bound(b);
    CHECK(with_m == doctest::Approx(reference_bound(1, 1, 1, 1, 0.05, 100, 2)));
    CHECK(with_d == doctest::Approx(reference_bound(1, 1, 1, 1, 0.05, 100, 5)));

    SUBCASE("m = d makes both branches identical") {
        BoundInputs eq;
        eq.d = 3;
        eq.m = 3;
        BoundComparison cmp = compare_conserved(eq);
        CHECK(cmp.bound_m == cmp.bound_d);
        CHECK(cmp.gap == 0.0);
    }
}

TEST_CASE("comparison gap properties in the provable regime") {
    // Regime: 2 R zeta^{1-1/rho} sqrt(n) >= 1.
    for (double R : {0.5, 1.0, 2.0})
        for (double zeta : {1.0, 2.0})
            for (int rho : {1, 2})
                for (int n : {25, 100, 400})
                    for (int d : {1, 2, 5})
                        for (int m = 0; m <= d; ++m) {
                            if (2.0 * R * std::pow(zeta, 1.0 - 1.0 / rho) *
                                    std::sqrt(double(n)) <
                                1.0)
                                continue;
                            BoundInputs b;
                            b.R = R;
                            b.zeta = zeta;
                            b.rho = rho;
                            b.n = n;
                            b.d = d;
                            b.m = m;
                            BoundComparison cmp = compare_conserved(b);
                            CHECK(cmp.gap >= -1e-12);
                            CHECK(cmp.gap ==
                                  doctest::Approx(cmp.bound_d - cmp.bound_m).epsilon(1e-12));
                            if (m == 0 && d >= 1)
                                CHECK(cmp.gap >=
                                      std::sqrt(std::pow(zeta, 2.0 / rho) / n) - 1e-12);
                        }
}

TEST_CASE("monotonicity grids") {
    SUBCASE("nondecreasing in the effective dimension") {
        for (double R : {0.5, 1.0, 4.0})
            for (int n : {16, 100, 900}) {
                if (2.0 * R * std::sqrt(double(n)) < 1.0) continue;
                BoundInputs b;
                b.R = R;
                b.n = n;
                b.d = 6;
                double prev = -1.0;
                for (int m = 0; m <= 6; ++m) {
                    b.m = m;
                    double v = eval_bound(b);
                    CHECK(v >= prev - 1e-12);
                    prev = v;
                }
            }
    }
    SUBCASE("nonincreasing in the sample count") {
        BoundInputs b;
        b.d = 3;
        b.m = 2;
        double prev = 1e100;
        for (int n : {10, 20, 50, 100, 1000, 10000}) {
            b.n = n;
            double v = eval_bound(b);
            CHECK(v <= prev + 1e-12);
            prev = v;
        }
    }
    SUBCASE("nondecreasing in the loss cap and the output norm") {
        BoundInputs b;
        b.d = 3;
        b.m = 2;
        double prev = -1.0;
        for (double C : {0.1, 0.5, 1.0, 2.0, 10.0}) {
            b.C = C;
            double v = eval_bound(b);
            CHECK(v >= prev - 1e-12);
            prev = v;
        }
        b.C = 1.0;
        prev = -1.0;
        for (double R : {0.5, 1.0, 2.0, 8.0}) {
            b.R = R;
            double v = eval_bound(b);
            CHECK(v >= prev - 1e-12);
            prev = v;
        }
    }
}

TEST_CASE("invalid inputs are rejected") {
    auto expect_domain_error = [](BoundInputs b) {
        CHECK_THROWS_AS(eval_bound(b), DomainError);
    };
    BoundInputs b;

    SUBCASE("delta outside (0,1)") {
        b.delta = 0.0;
        expect_domain_error(b);
        b.delta = 1.0;
        expect_domain_error(b);
        b.delta = -0.3;
        expect_domain_error(b);
    }
    SUBCASE("nonpositive sample count") {
        b.n = 0;
        expect_domain_error(b);
    }
    SUBCASE("negative scales") {
        b.C = -1.0;
        expect_domain_error(b);
        b = BoundInputs{};
        b.R = -0.1;
        expect_domain_error(b);
        b = BoundInputs{};
        b.zeta = -2.0;
        expect_domain_error(b);
    }
    SUBCASE("nonpositive smoothness order") {
        b.rho = 0;
        expect_domain_error(b);
    }
    SUBCASE("preimage dimension out of range") {
        b.d = 2;
        b.m = 3;
        expect_domain_error(b);
        b.m = -1;
        expect_domain_error(b);
    }
    SUBCASE("nonpositive log argument with xi >= 1") {
        b = BoundInputs{};
        b.d = 2;
        b.m = 1;
        b.R = 0.0; // 2 R zeta^{1-1/rho} sqrt(n) = 0
        expect_domain_error(b);
    }
    SUBCASE("zero R is fine when xi = 0 skips the log") {
        b = BoundInputs{};
        b.R = 0.0;
        b.m = 0;
        CHECK(eval_bound(b) == doctest::Approx(std::sqrt(std::log(20.0) / 200.0)));
    }
}
