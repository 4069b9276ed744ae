#include <chrono>
#include <cstdio>
#include <string>

#include "rudd/kernels.hpp"
#include "rudd/rng.hpp"

using rudd::Tensor;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, rudd::Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal();
  return t;
}

template <class Fn>
double time_ms(Fn&& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void report(const std::string& name, double serial_ms, double omp_ms, double diff) {
  std::printf("%-18s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   max|diff| %g\n",
              name.c_str(), serial_ms, omp_ms, serial_ms / omp_ms, diff);
}

}  // namespace

int main() {
  rudd::Rng rng(1234);

  {
    auto in = random_tensor({64, 64, 16}, rng);
    auto ker = random_tensor({3, 3, 16, 32}, rng);
    auto bias = random_tensor({32}, rng);
    auto s = rudd::kernels::conv2d_fwd_serial(in, ker, &bias);
    auto p = rudd::kernels::conv2d_fwd(in, ker, &bias);
    report("conv2d_fwd", time_ms([&] { rudd::kernels::conv2d_fwd_serial(in, ker, &bias); }, 5),
           time_ms([&] { rudd::kernels::conv2d_fwd(in, ker, &bias); }, 5), max_abs_diff(s, p));

    auto gout = random_tensor({64, 64, 32}, rng);
    auto si = rudd::kernels::conv2d_dinput_serial(gout, ker);
    auto pi = rudd::kernels::conv2d_dinput(gout, ker);
    report("conv2d_dinput", time_ms([&] { rudd::kernels::conv2d_dinput_serial(gout, ker); }, 5),
           time_ms([&] { rudd::kernels::conv2d_dinput(gout, ker); }, 5), max_abs_diff(si, pi));

    auto sk = rudd::kernels::conv2d_dkernel_serial(in, gout, 3, 3);
    auto pk = rudd::kernels::conv2d_dkernel(in, gout, 3, 3);
    report("conv2d_dkernel", time_ms([&] { rudd::kernels::conv2d_dkernel_serial(in, gout, 3, 3); }, 5),
           time_ms([&] { rudd::kernels::conv2d_dkernel(in, gout, 3, 3); }, 5), max_abs_diff(sk, pk));
  }

  {
    auto a = random_tensor({256, 256}, rng);
    auto b = random_tensor({256, 256}, rng);
    auto s = rudd::kernels::matmul_serial(a, b);
    auto p = rudd::kernels::matmul(a, b);
    report("matmul", time_ms([&] { rudd::kernels::matmul_serial(a, b); }, 5),
           time_ms([&] { rudd::kernels::matmul(a, b); }, 5), max_abs_diff(s, p));
  }

  {
    auto g = random_tensor({48, 48}, rng);
    auto s = rudd::kernels::upsample_bilinear_serial(g, 384, 384);
    auto p = rudd::kernels::upsample_bilinear(g, 384, 384);
    report("upsample_bilinear", time_ms([&] { rudd::kernels::upsample_bilinear_serial(g, 384, 384); }, 5),
           time_ms([&] { rudd::kernels::upsample_bilinear(g, 384, 384); }, 5), max_abs_diff(s, p));
  }

  return 0;
}
