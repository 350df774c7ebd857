#pragma once

#include <vector>

namespace slab {

// Singular values of a dense row-major matrix, descending. One-sided Jacobi
// in double precision; intended for the modest sizes the rank diagnostic
// sees (N up to a few hundred).
std::vector<double> singular_values(const double* a, int rows, int cols);

}  // namespace slab
