/* Weighted scatter-add kernels for the EmbeddingBag backward pass.
 *
 * All three strategies write into a compact gradient buffer out[U x n] where
 * slot[p] is the compact row for flat position p = b*k + j.  Build with
 * -ffp-contract=off: the reverse-indices result must match a sequential
 * reference bit for bit, which rules out fused multiply-adds.
 */
#include <stdint.h>
#include <string.h>
#include <omp.h>
#include <sched.h>

#define DEFINE_KERNELS(T, SUFFIX, UINT)                                            \
                                                                                   \
static inline void atomic_add_##SUFFIX(T *addr, T val) {                           \
    UINT *bits = (UINT *)addr;                                                     \
    UINT expected = __atomic_load_n(bits, __ATOMIC_RELAXED);                       \
    for (;;) {                                                                     \
        T cur;                                                                     \
        memcpy(&cur, &expected, sizeof(T));                                        \
        T next = cur + val;                                                        \
        UINT desired;                                                              \
        memcpy(&desired, &next, sizeof(T));                                        \
        if (__atomic_compare_exchange_n(bits, &expected, desired, 1,               \
                                        __ATOMIC_RELAXED, __ATOMIC_RELAXED))       \
            return;                                                                \
    }                                                                              \
}                                                                                  \
                                                                                   \
void backward_atomics_##SUFFIX(const T *grad_out, const T *weights,                \
                               const int64_t *slot, int64_t P, int64_t k,          \
                               int64_t n, T *out, int workers) {                   \
    _Pragma("omp parallel for schedule(static) num_threads(workers)")              \
    for (int64_t p = 0; p < P; ++p) {                                              \
        const T w = weights[p];                                                    \
        const T *g = grad_out + (p / k) * n;                                       \
        T *dst = out + slot[p] * n;                                                \
        for (int64_t d = 0; d < n; ++d) {                                          \
            T prod = w * g[d];                                                     \
            atomic_add_##SUFFIX(dst + d, prod);                                    \
        }                                                                          \
    }                                                                              \
}                                                                                  \
                                                                                   \
void backward_lock_##SUFFIX(const T *grad_out, const T *weights,                   \
                            const int64_t *slot, int64_t P, int64_t k,             \
                            int64_t n, T *out, uint8_t *locks, int workers) {      \
    _Pragma("omp parallel for schedule(static) num_threads(workers)")              \
    for (int64_t p = 0; p < P; ++p) {                                              \
        const T w = weights[p];                                                    \
        const T *g = grad_out + (p / k) * n;                                       \
        const int64_t r = slot[p];                                                 \
        T *dst = out + r * n;                                                      \
        while (__atomic_test_and_set(&locks[r], __ATOMIC_ACQUIRE)) {               \
            while (__atomic_load_n(&locks[r], __ATOMIC_RELAXED)) sched_yield();               \
        }                                                                          \
        for (int64_t d = 0; d < n; ++d) {                                          \
            T prod = w * g[d];                                                     \
            dst[d] += prod;                                                        \
        }                                                                          \
        __atomic_clear(&locks[r], __ATOMIC_RELEASE);                               \
    }                                                                              \
}                                                                                  \
                                                                                   \
void backward_reverse_##SUFFIX(const T *grad_out, const T *weights,                \
                               const int64_t *offsets, const int64_t *positions,   \
                               int64_t U, int64_t k, int64_t n, T *out,            \
                               int workers) {                                      \
    _Pragma("omp parallel for schedule(static) num_threads(workers)")              \
    for (int64_t r = 0; r < U; ++r) {                                              \
        T *dst = out + r * n;                                                      \
        for (int64_t e = offsets[r]; e < offsets[r + 1]; ++e) {                    \
            const int64_t p = positions[e];                                        \
            const T w = weights[p];                                                \
            const T *g = grad_out + (p / k) * n;                                   \
            for (int64_t d = 0; d < n; ++d) {                                      \
                T prod = w * g[d];                                                 \
                dst[d] += prod;                                                    \
            }                                                                      \
        }                                                                          \
    }                                                                              \
}

DEFINE_KERNELS(float, f32, uint32_t)
DEFINE_KERNELS(double, f64, uint64_t)
