#include "slab/svd.hpp"

#include <algorithm>
#include <cmath>

namespace slab {

std::vector<double> singular_values(const double* a, int rows, int cols) {
  // Column-major working copy; Jacobi rotations orthogonalize column pairs.
  std::vector<double> u(size_t(rows) * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) u[size_t(j) * rows + i] = a[size_t(i) * cols + j];

  const double tol = 1e-14;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (int i = 0; i < cols - 1; ++i) {
      for (int j = i + 1; j < cols; ++j) {
        double* ci = u.data() + size_t(i) * rows;
        double* cj = u.data() + size_t(j) * rows;
        double aa = 0, bb = 0, ab = 0;
        for (int r = 0; r < rows; ++r) {
          aa += ci[r] * ci[r];
          bb += cj[r] * cj[r];
          ab += ci[r] * cj[r];
        }
        if (std::abs(ab) <= tol * std::sqrt(aa * bb) || ab == 0.0) continue;
        double zeta = (bb - aa) / (2.0 * ab);
        double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (int r = 0; r < rows; ++r) {
          double vi = ci[r], vj = cj[r];
          ci[r] = c * vi - s * vj;
          cj[r] = s * vi + c * vj;
        }
        rotated = true;
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(cols);
  for (int j = 0; j < cols; ++j) {
    double norm = 0;
    const double* cj = u.data() + size_t(j) * rows;
    for (int r = 0; r < rows; ++r) norm += cj[r] * cj[r];
    sv[j] = std::sqrt(norm);
  }
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

}  // namespace slab
