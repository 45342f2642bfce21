#include "terlab/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace terlab::kern {
namespace {

const Kernels* select() {
    if (const char* env = std::getenv("TERLAB_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return &scalar_kernels();
        if (std::strcmp(env, "avx2") == 0 && avx2_available()) return &avx2_kernels();
    }
    return avx2_available() ? &avx2_kernels() : &scalar_kernels();
}

const Kernels* g_active = nullptr;

} // namespace

const Kernels& active() {
    if (!g_active) g_active = select();
    return *g_active;
}

void force(const Kernels& k) { g_active = &k; }

} // namespace terlab::kern
