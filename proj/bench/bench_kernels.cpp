// OpenMP kernels against their serial references. Pairs share inputs, so the
// ratio of the two timings is the parallel speedup on this machine.

#include <benchmark/benchmark.h>

#include "bfsurf/design.hpp"
#include "bfsurf/hlm_bf.hpp"
#include "bfsurf/reg_bf.hpp"
#include "bfsurf/surface.hpp"

using namespace bfsurf;

namespace {

const reg::RegressionData& fig1() {
  static const auto d = reg::simulate_regression(30, 0.0, 2.5, 1.0, 1);
  return d;
}

surface::EvaluatorSpec closed_spec() {
  surface::EvaluatorSpec s;
  s.kind = surface::EvaluatorKind::reg_closed;
  s.reg_data = fig1();
  return s;
}

const design::Design& grid() {
  static const auto g = [] {
    const auto [box, counts] = design::parse_grid("phi:log10:-3:3:30,mu:linear:-3:3:30");
    return design::grid_design(box, counts);
  }();
  return g;
}

const hlm::HlmDataset& school() {
  static const auto d = hlm::synthetic_hlm(1);
  return d;
}

design::HyperBox unit_box(std::size_t d) {
  std::vector<design::Dim> dims;
  for (std::size_t i = 0; i < d; ++i) dims.push_back({"x" + std::to_string(i), 0.0, 1.0, design::Scale::linear});
  return design::HyperBox(dims);
}

void BM_surface_parallel(benchmark::State& st) {
  const auto spec = closed_spec();
  for (auto _ : st) benchmark::DoNotOptimize(surface::evaluate_surface(spec, grid(), 1));
}
void BM_surface_serial(benchmark::State& st) {
  const auto spec = closed_spec();
  for (auto _ : st) benchmark::DoNotOptimize(reference::evaluate_surface(spec, grid(), 1));
}

void BM_hlm_slices_parallel(benchmark::State& st) {
  const auto h = hlm::default_hlm_hypers(school());
  for (auto _ : st) benchmark::DoNotOptimize(hlm::hlm_slices(school(), h));
}
void BM_hlm_slices_serial(benchmark::State& st) {
  const auto h = hlm::default_hlm_hypers(school());
  for (auto _ : st) benchmark::DoNotOptimize(reference::hlm_slices(school(), h));
}

void BM_lhs_parallel(benchmark::State& st) {
  const auto box = unit_box(8);
  for (auto _ : st) benchmark::DoNotOptimize(design::lhs_maximin(box, 200, 1));
}
void BM_lhs_serial(benchmark::State& st) {
  const auto box = unit_box(8);
  for (auto _ : st) benchmark::DoNotOptimize(reference::lhs_maximin(box, 200, 1));
}

void BM_mc_oracle_parallel(benchmark::State& st) {
  for (auto _ : st)
    benchmark::DoNotOptimize(reg::mc_oracle_log_marginal(fig1(), {0, 1, 1, 1}, reg::Model::M1, 200000, 3));
}
void BM_mc_oracle_serial(benchmark::State& st) {
  for (auto _ : st)
    benchmark::DoNotOptimize(reference::mc_oracle_log_marginal(fig1(), {0, 1, 1, 1}, reg::Model::M1, 200000, 3));
}

}  // namespace

BENCHMARK(BM_surface_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_surface_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_hlm_slices_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_hlm_slices_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_lhs_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_lhs_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_mc_oracle_parallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_mc_oracle_serial)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
