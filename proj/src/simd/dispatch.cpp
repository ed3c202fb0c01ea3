#include "vce/simd/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace vce::simd {
namespace {

const KernelTable kScalarTable{Level::scalar, &scalar::sgemm, &scalar::sum_sq_diff, &scalar::axpy};
#if defined(__x86_64__)
const KernelTable kAvx2Table{Level::avx2, &avx2::sgemm, &avx2::sum_sq_diff, &avx2::axpy};
const KernelTable kAvx512Table{Level::avx512, &avx512::sgemm, &avx512::sum_sq_diff,
                               &avx512::axpy};
#endif

Level probe() {
#if defined(__x86_64__)
    __builtin_cpu_init();
    if (__builtin_cpu_supports("avx512f")) return Level::avx512;
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Level::avx2;
#endif
    return Level::scalar;
}

Level initial_level() {
    Level level = detected_level();
    if (const char* env = std::getenv("VCE_SIMD")) {
        const std::string want(env);
        Level requested = level;
        if (want == "scalar") requested = Level::scalar;
        if (want == "avx2") requested = Level::avx2;
        if (want == "avx512") requested = Level::avx512;
        if (level_supported(requested)) level = requested;
    }
    return level;
}

std::atomic<int>& active_slot() {
    static std::atomic<int> slot{static_cast<int>(initial_level())};
    return slot;
}

}  // namespace

std::string_view level_name(Level level) {
    switch (level) {
        case Level::scalar: return "scalar";
        case Level::avx2: return "avx2";
        case Level::avx512: return "avx512";
    }
    return "unknown";
}

Level detected_level() {
    static const Level level = probe();
    return level;
}

bool level_supported(Level level) {
    return static_cast<int>(level) <= static_cast<int>(detected_level());
}

Level active_level() { return static_cast<Level>(active_slot().load()); }

void set_level(Level level) {
    if (!level_supported(level)) level = detected_level();
    active_slot().store(static_cast<int>(level));
}

const KernelTable& kernels(Level level) {
#if defined(__x86_64__)
    switch (level) {
        case Level::avx512: return kAvx512Table;
        case Level::avx2: return kAvx2Table;
        default: break;
    }
#endif
    (void)level;
    return kScalarTable;
}

const KernelTable& kernels() { return kernels(active_level()); }

}  // namespace vce::simd
