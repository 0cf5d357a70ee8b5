#include "conserve/bounds.hpp"

#include <algorithm>
#include <cmath>

#include "conserve/errors.hpp"

namespace conserve {

namespace {

void validate(const BoundInputs& b) {
    if (!(b.C >= 0.0) || !(b.R >= 0.0) || !(b.zeta >= 0.0))
        throw DomainError("bound: scale parameters must be nonnegative");
    if (b.rho < 1) throw DomainError("bound: rho must be a positive integer");
    if (!(b.delta > 0.0 && b.delta < 1.0)) throw DomainError("bound: delta must be in (0,1)");
    if (b.n < 1) throw DomainError("bound: n must be at least 1");
    if (b.m < 0 || b.d < 0 || b.m > b.d) throw DomainError("bound: need 0 <= m <= d");
}

} // namespace

double eval_bound(const BoundInputs& b) {
    validate(b);
    const int xi = b.conserved ? b.m : b.d;
    const double n = static_cast<double>(b.n);
    if (xi == 0) return b.C * std::sqrt(std::log(1.0 / b.delta) / (2.0 * n));

    const double log_arg =
        2.0 * b.R * std::pow(b.zeta, 1.0 - 1.0 / static_cast<double>(b.rho)) * std::sqrt(n);
    if (!(log_arg > 0.0)) throw DomainError("bound: log argument must be positive");
    const double radicand = (xi * std::log(std::max(std::sqrt(static_cast<double>(xi)), 1.0)) +
                             xi * std::log(log_arg) + std::log(1.0 / b.delta)) /
                            (2.0 * n);
    if (!(radicand >= 0.0)) throw DomainError("bound: negative radicand");
    return b.C * std::sqrt(radicand) +
           std::sqrt(std::pow(b.zeta, 2.0 / static_cast<double>(b.rho)) / n);
}

BoundComparison compare_conserved(const BoundInputs& b) {
    validate(b);
    BoundInputs bm = b, bd = b;
    bm.conserved = true;
    bd.conserved = false;
    BoundComparison out;
    out.bound_m = eval_bound(bm);
    out.bound_d = eval_bound(bd);
    out.gap = out.bound_d - out.bound_m;
    return out;
}

} // namespace conserve
