#include "msholo/fft.hpp"

#include <fftw3.h>

#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <tuple>

namespace msholo {

namespace {

std::atomic<FftPlanning> g_planning{FftPlanning::measure};
std::atomic<std::size_t> g_max_elements{std::size_t{1} << 26};

unsigned planner_flags() {
  return g_planning.load() == FftPlanning::measure ? FFTW_MEASURE : FFTW_ESTIMATE;
}

void check_size(Shape shape) {
  if (shape.rows < 1 || shape.cols < 1 || shape.size() > g_max_elements.load()) {
    std::ostringstream os;
    os << "transform size " << shape.rows << "x" << shape.cols << " exceeds the configured maximum of "
       << g_max_elements.load() << " elements";
    throw SizingError(os.str());
  }
}

// FFTW's planner is not thread-safe; execution of an existing plan on new
// arrays is. Plans are created and looked up under one mutex and executed
// outside it.
template <typename Real>
struct Planner;

template <>
struct Planner<double> {
  using plan_type = fftw_plan;
  using complex_type = fftw_complex;

  static plan_type make(Shape s, int sign) {
    AlignedVector<std::complex<double>> scratch(s.size());
    auto* p = reinterpret_cast<complex_type*>(scratch.data());
    return fftw_plan_dft_2d(s.rows, s.cols, p, p, sign, planner_flags());
  }
  static void execute(plan_type plan, std::complex<double>* data) {
    auto* p = reinterpret_cast<complex_type*>(data);
    fftw_execute_dft(plan, p, p);
  }
  static int alignment_of(std::complex<double>* data) {
    return fftw_alignment_of(reinterpret_cast<double*>(data));
  }
};

template <>
struct Planner<float> {
  using plan_type = fftwf_plan;
  using complex_type = fftwf_complex;

  static plan_type make(Shape s, int sign) {
    AlignedVector<std::complex<float>> scratch(s.size());
    auto* p = reinterpret_cast<complex_type*>(scratch.data());
    return fftwf_plan_dft_2d(s.rows, s.cols, p, p, sign, planner_flags());
  }
  static void execute(plan_type plan, std::complex<float>* data) {
    auto* p = reinterpret_cast<complex_type*>(data);
    fftwf_execute_dft(plan, p, p);
  }
  static int alignment_of(std::complex<float>* data) {
    return fftwf_alignment_of(reinterpret_cast<float*>(data));
  }
};

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

template <typename Real>
typename Planner<Real>::plan_type get_plan(Shape s, FftDirection direction) {
  using Key = std::tuple<int, int, int, int>;
  static std::map<Key, typename Planner<Real>::plan_type> cache;
  const int sign = direction == FftDirection::forward ? FFTW_FORWARD : FFTW_BACKWARD;
  const Key key{s.rows, s.cols, sign, static_cast<int>(g_planning.load())};
  std::lock_guard lock(planner_mutex());
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto plan = Planner<Real>::make(s, sign);
  if (plan == nullptr) throw SizingError("FFT planner failed");
  cache.emplace(key, plan);
  return plan;
}

template <typename Real>
void transform(std::span<std::complex<Real>> data, Shape shape, FftDirection direction) {
  check_size(shape);
  if (data.size() != shape.size()) throw ShapeMismatch("fft2: buffer length does not match shape");
  auto plan = get_plan<Real>(shape, direction);
  std::complex<Real>* ptr = data.data();
  if (Planner<Real>::alignment_of(ptr) != 0) {
    AlignedVector<std::complex<Real>> tmp(data.begin(), data.end());
    Planner<Real>::execute(plan, tmp.data());
    std::copy(tmp.begin(), tmp.end(), data.begin());
  } else {
    Planner<Real>::execute(plan, ptr);
  }
  const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(shape.size())));
  for (auto& v : data) v *= scale;
}

}  // namespace

void set_fft_planning(FftPlanning planning) { g_planning.store(planning); }
FftPlanning fft_planning() { return g_planning.load(); }

void set_max_fft_elements(std::size_t count) { g_max_elements.store(count); }
std::size_t max_fft_elements() { return g_max_elements.load(); }

void fft2_inplace(std::span<std::complex<double>> data, Shape shape, FftDirection direction) {
  transform<double>(data, shape, direction);
}

void fft2_inplace(std::span<std::complex<float>> data, Shape shape, FftDirection direction) {
  transform<float>(data, shape, direction);
}

template <typename Real>
BasicField<Real> fft2(const BasicField<Real>& field) {
  typename BasicField<Real>::Buffer buf(field.buffer());
  fft2_inplace(std::span<std::complex<Real>>(buf), field.shape(), FftDirection::forward);
  return BasicField<Real>(field.shape(), field.pitch(), field.wavelength(), std::move(buf));
}

template <typename Real>
BasicField<Real> ifft2(const BasicField<Real>& field) {
  typename BasicField<Real>::Buffer buf(field.buffer());
  fft2_inplace(std::span<std::complex<Real>>(buf), field.shape(), FftDirection::inverse);
  return BasicField<Real>(field.shape(), field.pitch(), field.wavelength(), std::move(buf));
}

template BasicField<double> fft2(const BasicField<double>&);
template BasicField<float> fft2(const BasicField<float>&);
template BasicField<double> ifft2(const BasicField<double>&);
template BasicField<float> ifft2(const BasicField<float>&);

}  // namespace msholo
