#pragma once

// Hot inner-loop kernels. Reduction orders are fixed by the lane structure,
// so every kernel is bit-reproducible run to run and across thread counts.

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace issm::simd {

template <typename S>
inline S dot8(const S* a, const S* b, int n) {
  S a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0;
  int p = 0;
  for (; p + 8 <= n; p += 8) {
    a0 += a[p + 0] * b[p + 0];
    a1 += a[p + 1] * b[p + 1];
    a2 += a[p + 2] * b[p + 2];
    a3 += a[p + 3] * b[p + 3];
    a4 += a[p + 4] * b[p + 4];
    a5 += a[p + 5] * b[p + 5];
    a6 += a[p + 6] * b[p + 6];
    a7 += a[p + 7] * b[p + 7];
  }
  S tail = S(0);
  for (; p < n; ++p) tail += a[p] * b[p];
  return (((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))) + tail;
}

// y[j] += c * x[j]
template <typename S>
inline void axpy(S c, const S* x, S* y, int n) {
  for (int j = 0; j < n; ++j) y[j] += c * x[j];
}

#if defined(__AVX2__) && defined(__FMA__)
inline float dot8(const float* a, const float* b, int n) {
  __m256 acc = _mm256_setzero_ps();
  int p = 0;
  for (; p + 8 <= n; p += 8)
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + p), _mm256_loadu_ps(b + p), acc);
  alignas(32) float lanes[8];
  _mm256_store_ps(lanes, acc);
  float tail = 0.f;
  for (; p < n; ++p) tail += a[p] * b[p];
  return (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
          ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) +
         tail;
}

inline double dot8(const double* a, const double* b, int n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  int p = 0;
  for (; p + 8 <= n; p += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + p), _mm256_loadu_pd(b + p), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + p + 4), _mm256_loadu_pd(b + p + 4), acc1);
  }
  alignas(32) double lanes[8];
  _mm256_store_pd(lanes, acc0);
  _mm256_store_pd(lanes + 4, acc1);
  double tail = 0.0;
  for (; p < n; ++p) tail += a[p] * b[p];
  return (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
          ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) +
         tail;
}

inline void axpy(float c, const float* x, float* y, int n) {
  __m256 vc = _mm256_set1_ps(c);
  int j = 0;
  for (; j + 8 <= n; j += 8)
    _mm256_storeu_ps(y + j,
                     _mm256_fmadd_ps(vc, _mm256_loadu_ps(x + j), _mm256_loadu_ps(y + j)));
  for (; j < n; ++j) y[j] += c * x[j];
}

inline void axpy(double c, const double* x, double* y, int n) {
  __m256d vc = _mm256_set1_pd(c);
  int j = 0;
  for (; j + 4 <= n; j += 4)
    _mm256_storeu_pd(y + j,
                     _mm256_fmadd_pd(vc, _mm256_loadu_pd(x + j), _mm256_loadu_pd(y + j)));
  for (; j < n; ++j) y[j] += c * x[j];
}
#endif

}  // namespace issm::simd
