#pragma once

namespace conserve {

// Inputs of the sample-complexity bound. `conserved` selects the effective
// dimension: the preimage dimension m when the conserved quantity is
// enforced, the ambient dimension d otherwise.
struct BoundInputs {
    double C = 1.0;    // loss upper bound
    double R = 1.0;    // sup of the parameter-to-output map norm
    double zeta = 1.0; // Lipschitz constant
    int rho = 1;       // smoothness order, positive integer
    double delta = 0.05;
    int n = 100; // sample count
    int d = 1;   // ambient dimension
    int m = 0;   // preimage dimension, 0 <= m <= d
    bool conserved = true;
};

// C*sqrt((xi*ln(max(sqrt(xi),1)) + xi*ln(2R zeta^{1-1/rho} sqrt(n)) + ln(1/delta)) / (2n))
//   + 1{xi>=1} * sqrt(zeta^{2/rho} / n)
// with xi = m or d. xi = 0 drops the log terms exactly. Throws DomainError on
// invalid inputs, a nonpositive log argument, or a negative radicand.
double eval_bound(const BoundInputs& b);

struct BoundComparison {
    double bound_m = 0.0; // conserved branch
    double bound_d = 0.0; // unconserved branch
    double gap = 0.0;     // bound_d - bound_m
};
BoundComparison compare_conserved(const BoundInputs& b);

} // namespace conserve
