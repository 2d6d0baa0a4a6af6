#include <cstdlib>
#include <stdexcept>
#include <string>

#include "ckgc/kernels.hpp"

namespace ckgc::kernels {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

struct Selection {
  const KernelTable* table;
  std::string isa;
};

Selection select() {
  const char* forced = std::getenv("CKGC_KERNELS");
  if (forced != nullptr && *forced != '\0') {
    const std::string want(forced);
    if (want == "scalar") return {&scalar_table(), "scalar"};
    if (want == "avx2") {
      const KernelTable* t = avx2_table();
      if (t == nullptr)
        throw std::runtime_error("CKGC_KERNELS=avx2 but the CPU lacks AVX2/FMA");
      return {t, "avx2"};
    }
    if (want != "auto")
      throw std::runtime_error("CKGC_KERNELS must be scalar, avx2 or auto, got: " + want);
  }
  if (const KernelTable* t = avx2_table()) return {t, "avx2"};
  return {&scalar_table(), "scalar"};
}

const Selection& selection() {
  static const Selection s = select();
  return s;
}

}  // namespace

const KernelTable& active() { return *selection().table; }

const std::string& active_isa() { return selection().isa; }

}  // namespace ckgc::kernels
