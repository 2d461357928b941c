#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "uvmb/autodiff.hpp"
#include "uvmb/tensor.hpp"

namespace uvmb::ssm {

// phi(z) = (exp(z) - 1) / z with a 4-term Taylor expansion below |z| < 1e-4
// (removable singularity at z = 0). phi_prime is its derivative.
template <typename T>
T phi(T z);
template <typename T>
T phi_prime(T z);

// Zero-order-hold discretization of a diagonal continuous system.
//   Abar = exp(delta * A)
//   Bbar = phi(delta * A) * delta * B
// A[D,N] strictly negative rates, delta[L,D] strictly positive timescales,
// B[L,N] per-token input projection. Outputs are [L,D,N].
// Throws NumericError on nonpositive delta.
template <typename T>
std::pair<Var<T>, Var<T>> zoh_discretize(Tape<T>& tape, const Var<T>& A, const Var<T>& delta,
                                         const Var<T>& B);

// Discrete recurrence over a sequence:
//   h_k = Abar_k * h_{k-1} + Bbar_k * x_k      (h_0 = 0)
//   y_k[d] = sum_n C[k,n] * h_k[d,n]
// Abar,Bbar [L,D,N]; C [L,N]; x [L,D]; returns y [L,D]. Backward runs the
// reverse-time recurrence for exact adjoints.
template <typename T>
Var<T> ssm_scan(Tape<T>& tape, const Var<T>& Abar, const Var<T>& Bbar, const Var<T>& C,
                const Var<T>& x);

// Classical 4th-order fixed-step integration of h' = A h + B x(t), y = C h,
// from h(0) = 0. Test oracle for the discretized recurrence. Scalar overload
// and a dense-A overload (row-major N x N, intended for N <= 4).
double ode_reference(double A, double B, double C, const std::function<double(double)>& x_of_t,
                     double t_end, double dt);
double ode_reference_dense(const std::vector<double>& A, const std::vector<double>& B,
                           const std::vector<double>& C, int N,
                           const std::function<double(double)>& x_of_t, double t_end, double dt);

// Advance the state h in place over one interval of length dt_total with the
// input held constant (substeps of at most dt_step). Lets callers integrate
// piecewise-constant inputs without sampling across interval boundaries.
void ode_advance_dense(const std::vector<double>& A, const std::vector<double>& B, int N,
                       double x_const, double dt_total, double dt_step, std::vector<double>& h);

}  // namespace uvmb::ssm
