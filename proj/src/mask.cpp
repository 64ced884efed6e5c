#include "l3d/mask.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

namespace l3d {

std::size_t BinaryPattern::ones() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::optional<std::uint32_t> primitive_polynomial(int order) {
  switch (order) {
    case 3: return 0xBu;      // x^3 + x + 1
    case 4: return 0x13u;     // x^4 + x + 1
    case 5: return 0x25u;     // x^5 + x^2 + 1
    case 6: return 0x43u;     // x^6 + x + 1
    case 7: return 0x83u;     // x^7 + x + 1
    case 8: return 0x11Du;    // x^8 + x^4 + x^3 + x^2 + 1
    case 9: return 0x211u;    // x^9 + x^4 + 1
    case 10: return 0x409u;   // x^10 + x^3 + 1
    case 11: return 0x805u;   // x^11 + x^2 + 1
    case 12: return 0x1053u;  // x^12 + x^6 + x^4 + x + 1
    default: return std::nullopt;
  }
}

BinaryPattern generate_mls(int order, std::optional<std::uint32_t> taps, std::uint32_t seed_state,
                           double feature_width_m) {
  if (order < 2 || order > 31) throw ConfigError("MLS order must be in [2, 31]");
  if (!taps) {
    taps = primitive_polynomial(order);
    if (!taps) throw ConfigError("no built-in primitive polynomial for order " + std::to_string(order));
  }
  if (!(feature_width_m > 0.0)) throw ConfigError("feature width must be positive");
  const std::uint32_t window = (1u << order) - 1u;
  const std::uint32_t state0 = seed_state & window;
  if (state0 == 0) throw ConfigError("LFSR seed state must be nonzero");
  if (((*taps >> order) & 1u) == 0 || (*taps & 1u) == 0)
    throw ConfigError("taps must include the x^order and constant terms");
  const std::uint32_t feedback = *taps & window;

  // state bit i holds a[n + i]; shifting right advances n.
  const std::size_t length = (std::size_t{1} << order) - 1;
  BinaryPattern pattern;
  pattern.feature_width_m = feature_width_m;
  pattern.bits.resize(length);
  std::uint32_t state = state0;
  for (std::size_t n = 0; n < length; ++n) {
    pattern.bits[n] = static_cast<std::uint8_t>(state & 1u);
    const std::uint32_t next = std::popcount(state & feedback) & 1u;
    state = (state >> 1) | (next << (order - 1));
    if (state == state0 && n + 1 < length)
      throw ConfigError("taps are not primitive: period " + std::to_string(n + 1) + " < " +
                        std::to_string(length));
  }
  if (state != state0) throw ConfigError("taps are not primitive");
  return pattern;
}

BinaryPattern pad_pattern(BinaryPattern pattern, std::size_t count) {
  pattern.bits.insert(pattern.bits.end(), count, std::uint8_t{0});
  return pattern;
}

BinaryPattern default_pattern(double feature_width_m) {
  return pad_pattern(generate_mls(10, std::nullopt, 1u, feature_width_m), 1);
}

MaskProfile::MaskProfile(Eigen::VectorXd samples, double grid_step_m, double origin_m)
    : samples_(std::move(samples)), step_(grid_step_m), origin_(origin_m) {
  if (samples_.size() < 2) throw ConfigError("mask profile needs at least 2 samples");
  if (!(step_ > 0.0) || !std::isfinite(step_)) throw ConfigError("grid step must be positive");
  if (!std::isfinite(origin_)) throw ConfigError("mask origin must be finite");
  inv_step_ = 1.0 / step_;
  const Eigen::Index n = samples_.size();
  deriv_samples_.resize(n);
  // Transmittance is 0 beyond the support, so the end nodes see a 0 neighbor.
  for (Eigen::Index i = 0; i < n; ++i) {
    const double left = i > 0 ? samples_[i - 1] : 0.0;
    const double right = i + 1 < n ? samples_[i + 1] : 0.0;
    deriv_samples_[i] = (right - left) / (2.0 * step_);
  }
  // Value and slope of each segment side by side, so one cache line serves both.
  pairs_ = Eigen::VectorXd::Zero(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    pairs_[2 * i] = samples_[i];
    pairs_[2 * i + 1] = i + 1 < n ? samples_[i + 1] - samples_[i] : 0.0;
  }
}

double MaskProfile::support_halfwidth_m() const {
  return std::max(std::abs(support_lo_m()), std::abs(support_hi_m()));
}

double MaskProfile::value(double u) const {
  const double t = (u - origin_) * inv_step_;
  const Eigen::Index last = samples_.size() - 1;
  if (!(t >= 0.0) || t > static_cast<double>(last)) return 0.0;
  const Eigen::Index k = std::min(static_cast<Eigen::Index>(t), last - 1);
  const double frac = t - static_cast<double>(k);
  return samples_[k] + frac * (samples_[k + 1] - samples_[k]);
}

double MaskProfile::derivative(double u) const {
  const double t = (u - origin_) * inv_step_;
  if (!(t >= 0.0) || t > static_cast<double>(samples_.size() - 1)) return 0.0;
  return derivative_at(t);
}

double MaskProfile::derivative_at(double t) const {
  const auto k = static_cast<Eigen::Index>(t);
  const double frac = t - static_cast<double>(k);
  if (frac == 0.0) return deriv_samples_[k];
  return (samples_[k + 1] - samples_[k]) * inv_step_;
}

void MaskProfile::sample(std::span<const double> coords, double scale, double offset,
                         std::span<double> out) const {
  for (std::size_t k = 0; k < coords.size(); ++k) out[k] = value(scale * coords[k] + offset);
}

void MaskProfile::sample_derivative(std::span<const double> coords, double scale, double offset,
                                    std::span<double> out) const {
  for (std::size_t k = 0; k < coords.size(); ++k)
    out[k] = derivative(scale * coords[k] + offset);
}

// Every argument lies in [0, last), so no clamping or masking is needed. Matches
// the general path bit for bit: the stored slope is the same difference it computes.
void MaskProfile::sample_inside(double t0, double dt, std::span<double> out) const {
  const double* pr = pairs_.data();
  double* dst = out.data();
  const int n = static_cast<int>(out.size());
  int k = 0;
#if defined(__AVX512F__)
  {
    const __m512d t0v = _mm512_set1_pd(t0);
    const __m512d dtv = _mm512_set1_pd(dt);
    const __m512d lane = _mm512_set_pd(7, 6, 5, 4, 3, 2, 1, 0);
    for (; k + 8 <= n; k += 8) {
      const __m512d t = _mm512_fmadd_pd(_mm512_add_pd(_mm512_set1_pd(k), lane), dtv, t0v);
      const __m512d fl = _mm512_roundscale_pd(t, _MM_FROUND_TO_NEG_INF);
      const __m256i idx = _mm256_slli_epi32(_mm512_cvttpd_epi32(fl), 1);
      const __m512d a = _mm512_i32gather_pd(idx, pr, 8);
      const __m512d b = _mm512_i32gather_pd(idx, pr + 1, 8);
      _mm512_storeu_pd(dst + k, _mm512_fmadd_pd(_mm512_sub_pd(t, fl), b, a));
    }
  }
#endif
  for (; k < n; ++k) {
    const double t = std::fma(static_cast<double>(k), dt, t0);
    const double fl = std::floor(t);
    const auto idx = 2 * static_cast<std::ptrdiff_t>(fl);
    dst[k] = std::fma(t - fl, pr[idx + 1], pr[idx]);
  }
}

void MaskProfile::sample_uniform(double u0, double du, std::span<double> out) const {
  const double last = static_cast<double>(samples_.size() - 1);
  const double last_seg = last - 1.0;
  const double t0 = (u0 - origin_) * inv_step_;
  const double dt = du * inv_step_;
  const double* s = samples_.data();
  double* dst = out.data();
  const int n = static_cast<int>(out.size());
  int k = 0;
  if (n > 0) {
    const double ta = t0, tb = std::fma(static_cast<double>(n - 1), dt, t0);
    if (std::min(ta, tb) >= 0.0 && std::max(ta, tb) < last) {
      sample_inside(t0, dt, out);
      return;
    }
  }
#if defined(__AVX512F__)
  {
    const __m512d zero = _mm512_setzero_pd();
    const __m512d lastv = _mm512_set1_pd(last);
    const __m512d segv = _mm512_set1_pd(last_seg);
    const __m512d t0v = _mm512_set1_pd(t0);
    const __m512d dtv = _mm512_set1_pd(dt);
    const __m512d lane = _mm512_set_pd(7, 6, 5, 4, 3, 2, 1, 0);
    for (; k + 8 <= n; k += 8) {
      const __m512d kv = _mm512_add_pd(_mm512_set1_pd(k), lane);
      const __m512d t = _mm512_fmadd_pd(kv, dtv, t0v);
      const __mmask8 inside =
          _mm512_cmp_pd_mask(t, zero, _CMP_GE_OQ) & _mm512_cmp_pd_mask(t, lastv, _CMP_LE_OQ);
      const __m512d tc = _mm512_min_pd(_mm512_max_pd(t, zero), lastv);
      const __m512d fl = _mm512_min_pd(_mm512_roundscale_pd(tc, _MM_FROUND_TO_NEG_INF), segv);
      const __m256i idx = _mm512_cvttpd_epi32(fl);
      const __m512d a = _mm512_i32gather_pd(idx, s, 8);
      const __m512d b = _mm512_i32gather_pd(idx, s + 1, 8);
      const __m512d v = _mm512_fmadd_pd(_mm512_sub_pd(tc, fl), _mm512_sub_pd(b, a), a);
      _mm512_storeu_pd(dst + k, _mm512_maskz_mov_pd(inside, v));
    }
  }
#endif
#if defined(__AVX2__) && defined(__FMA__)
  const __m256d zero = _mm256_setzero_pd();
  const __m256d lastv = _mm256_set1_pd(last);
  const __m256d segv = _mm256_set1_pd(last_seg);
  const __m256d t0v = _mm256_set1_pd(t0);
  const __m256d dtv = _mm256_set1_pd(dt);
  for (; k + 4 <= n; k += 4) {
    const __m256d kv = _mm256_set_pd(k + 3, k + 2, k + 1, k);
    const __m256d t = _mm256_fmadd_pd(kv, dtv, t0v);
    const __m256d inside = _mm256_and_pd(_mm256_cmp_pd(t, zero, _CMP_GE_OQ),
                                         _mm256_cmp_pd(t, lastv, _CMP_LE_OQ));
    const __m256d tc = _mm256_min_pd(_mm256_max_pd(t, zero), lastv);
    const __m256d fl = _mm256_min_pd(_mm256_floor_pd(tc), segv);
    const __m128i idx = _mm256_cvttpd_epi32(fl);
    const __m256d a = _mm256_i32gather_pd(s, idx, 8);
    const __m256d b = _mm256_i32gather_pd(s + 1, idx, 8);
    const __m256d v = _mm256_fmadd_pd(_mm256_sub_pd(tc, fl), _mm256_sub_pd(b, a), a);
    _mm256_storeu_pd(dst + k, _mm256_and_pd(v, inside));
  }
#endif
  for (; k < n; ++k) {
    const double t = std::fma(static_cast<double>(k), dt, t0);
    const double tc = std::min(std::max(t, 0.0), last);
    const double fl = std::min(std::floor(tc), last_seg);
    const auto idx = static_cast<std::ptrdiff_t>(fl);
    const double v = std::fma(tc - fl, s[idx + 1] - s[idx], s[idx]);
    dst[k] = (t >= 0.0 && t <= last) ? v : 0.0;
  }
}

void MaskProfile::sample_derivative_uniform(double u0, double du, std::span<double> out) const {
  const double last = static_cast<double>(samples_.size() - 1);
  const double last_seg = last - 1.0;
  const double t0 = (u0 - origin_) * inv_step_;
  const double dt = du * inv_step_;
  const double* s = samples_.data();
  const double* ds = deriv_samples_.data();
  double* dst = out.data();
  const int n = static_cast<int>(out.size());
  int k = 0;
#if defined(__AVX2__) && defined(__FMA__)
  const __m256d zero = _mm256_setzero_pd();
  const __m256d lastv = _mm256_set1_pd(last);
  const __m256d segv = _mm256_set1_pd(last_seg);
  const __m256d t0v = _mm256_set1_pd(t0);
  const __m256d dtv = _mm256_set1_pd(dt);
  const __m256d inv = _mm256_set1_pd(inv_step_);
  for (; k + 4 <= n; k += 4) {
    const __m256d kv = _mm256_set_pd(k + 3, k + 2, k + 1, k);
    const __m256d t = _mm256_fmadd_pd(kv, dtv, t0v);
    const __m256d inside = _mm256_and_pd(_mm256_cmp_pd(t, zero, _CMP_GE_OQ),
                                         _mm256_cmp_pd(t, lastv, _CMP_LE_OQ));
    const __m256d tc = _mm256_min_pd(_mm256_max_pd(t, zero), lastv);
    const __m256d node = _mm256_floor_pd(tc);
    const __m256d fl = _mm256_min_pd(node, segv);
    const __m128i idx = _mm256_cvttpd_epi32(fl);
    const __m256d a = _mm256_i32gather_pd(s, idx, 8);
    const __m256d b = _mm256_i32gather_pd(s + 1, idx, 8);
    const __m256d at_node = _mm256_i32gather_pd(ds, _mm256_cvttpd_epi32(node), 8);
    const __m256d slope = _mm256_mul_pd(_mm256_sub_pd(b, a), inv);
    const __m256d on_node = _mm256_cmp_pd(tc, node, _CMP_EQ_OQ);
    const __m256d v = _mm256_blendv_pd(slope, at_node, on_node);
    _mm256_storeu_pd(dst + k, _mm256_and_pd(v, inside));
  }
#endif
  for (; k < n; ++k) {
    const double t = std::fma(static_cast<double>(k), dt, t0);
    dst[k] = (t >= 0.0 && t <= last) ? derivative_at(t) : 0.0;
  }
}

MaskProfile build_mask_profile(const BinaryPattern& pattern, const MaskBuildOptions& opts) {
  if (pattern.bits.empty()) throw ConfigError("empty mask pattern");
  const double fw = pattern.feature_width_m;
  const double step = opts.grid_step_m.value_or(fw / 20.0);
  if (!(step > 0.0)) throw ConfigError("grid step must be positive");
  if (step > fw / 10.0 * (1.0 + 1e-12))
    throw ConfigError("grid step must resolve mask features (step <= feature_width / 10)");
  if (!(opts.blur_len_m > 0.0)) throw ConfigError("blur length must be positive");
  if (!(opts.blur_sigma_samples > 0.0)) throw ConfigError("blur sigma must be positive");

  const double width = pattern.width_m();
  const auto pattern_nodes = static_cast<Eigen::Index>(std::ceil(width / step - 1e-9));
  const auto half_taps = static_cast<Eigen::Index>(std::lround(opts.blur_len_m / (2.0 * step)));
  const Eigen::Index taps = 2 * half_taps + 1;
  if (taps > pattern_nodes) throw ConfigError("blur kernel is longer than the mask profile");

  // Zero margin so the blurred tails and one exact zero fit on each side.
  const Eigen::Index pad = half_taps + 1;
  const Eigen::Index count = pattern_nodes + 2 * pad;
  const double origin = -0.5 * static_cast<double>(count - 1) * step;

  Eigen::VectorXd binary = Eigen::VectorXd::Zero(count);
  const auto nbits = static_cast<std::ptrdiff_t>(pattern.bits.size());
  for (Eigen::Index n = 0; n < count; ++n) {
    const double x = origin + static_cast<double>(n) * step;
    const double pos = (x + 0.5 * width) / fw;
    if (pos < 0.0) continue;
    const auto idx = static_cast<std::ptrdiff_t>(std::floor(pos));
    if (idx >= nbits) continue;
    binary[n] = pattern.bits[static_cast<std::size_t>(idx)];
  }

  Eigen::VectorXd kernel(taps);
  for (Eigen::Index k = 0; k < taps; ++k) {
    const double x = static_cast<double>(k - half_taps) / opts.blur_sigma_samples;
    kernel[k] = std::exp(-0.5 * x * x);
  }
  kernel /= kernel.sum();

  Eigen::VectorXd smooth = Eigen::VectorXd::Zero(count);
  for (Eigen::Index n = 0; n < count; ++n) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < taps; ++k) {
      const Eigen::Index src = n + k - half_taps;
      if (src >= 0 && src < count) acc += kernel[k] * binary[src];
    }
    smooth[n] = std::clamp(acc, 0.0, 1.0);
  }
  return MaskProfile(std::move(smooth), step, origin);
}

Eigen::VectorXd psi_1d(const MaskProfile& profile, const CameraGeometry& geom, double tan_theta,
                       double alpha) {
  const Eigen::VectorXd s = geom.sensor_coords();
  Eigen::VectorXd out(s.size());
  profile.sample({s.data(), static_cast<std::size_t>(s.size())}, alpha,
                 geom.mask_sensor_distance_m * tan_theta,
                 {out.data(), static_cast<std::size_t>(out.size())});
  return out;
}

Eigen::VectorXd g_1d(const MaskProfile& profile, const CameraGeometry& geom, double tan_theta,
                     double alpha) {
  const Eigen::VectorXd s = geom.sensor_coords();
  Eigen::VectorXd out(s.size());
  profile.sample_derivative({s.data(), static_cast<std::size_t>(s.size())}, alpha,
                            geom.mask_sensor_distance_m * tan_theta,
                            {out.data(), static_cast<std::size_t>(out.size())});
  return out;
}

}  // namespace l3d
