#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mda/rng.hpp"
#include "mda/volume.hpp"

namespace mda {

std::array<double, 4> phantom_intensity_bands() {
  return {0.05, 0.35, 0.65, 0.95};
}

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

// Three low-frequency plane waves; smooth by construction.
struct WaveField {
  std::array<std::array<double, 3>, 3> dir;
  std::array<double, 3> phase;
  std::array<double, 3> freq;
  double amplitude = 0.0;

  double at(double u0, double u1, double u2) const {
    double s = 0.0;
    for (int w = 0; w < 3; ++w) {
      const double t = dir[static_cast<std::size_t>(w)][0] * u0 +
                       dir[static_cast<std::size_t>(w)][1] * u1 +
                       dir[static_cast<std::size_t>(w)][2] * u2;
      s += std::sin(kTau * freq[static_cast<std::size_t>(w)] * t +
                    phase[static_cast<std::size_t>(w)]);
    }
    return amplitude * s / 3.0;
  }
};

WaveField make_field(rng::Stream& stream, double amplitude, double max_freq) {
  WaveField f;
  f.amplitude = amplitude;
  for (int w = 0; w < 3; ++w) {
    double norm = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = stream.next_uniform(-1.0, 1.0);
      f.dir[static_cast<std::size_t>(w)][static_cast<std::size_t>(a)] = d;
      norm += d * d;
    }
    norm = std::sqrt(std::max(norm, 1e-9));
    for (int a = 0; a < 3; ++a) f.dir[static_cast<std::size_t>(w)][static_cast<std::size_t>(a)] /= norm;
    f.phase[static_cast<std::size_t>(w)] = stream.next_uniform(0.0, kTau);
    f.freq[static_cast<std::size_t>(w)] = stream.next_uniform(0.8, max_freq);
  }
  return f;
}

}  // namespace

Volume synth_phantom(std::uint64_t seed, const PhantomConfig& config) {
  if (config.num_classes != 4) {
    throw UsageError("synth_phantom: only 4 tissue classes are supported");
  }
  rng::Stream stream(rng::derive_seed(seed, {rng::fnv1a("phantom")}));

  Volume v;
  v.dims = config.dims;
  v.spacing = {1.0, 1.0, 1.0};
  v.image.resize(static_cast<std::size_t>(v.numel()));
  v.labels.resize(static_cast<std::size_t>(v.numel()));

  // Ellipsoid center jittered around the volume center; outer semi-axes take
  // ~38% of each extent so background stays the majority class.
  std::array<double, 3> center{}, radii{};
  for (int a = 0; a < 3; ++a) {
    const double d = static_cast<double>(config.dims[static_cast<std::size_t>(a)]);
    center[static_cast<std::size_t>(a)] = 0.5 * d + stream.next_uniform(-0.03, 0.03) * d;
    radii[static_cast<std::size_t>(a)] = 0.38 * d * stream.next_uniform(0.92, 1.08);
  }

  const WaveField deform = make_field(stream, config.deform_amplitude, 2.0);
  const WaveField bias = make_field(stream, config.bias_amplitude, 1.5);

  // Normalized radius thresholds for the core / middle / outer shells.
  const double t_core = 0.55, t_mid = 0.80, t_outer = 1.00;
  const auto bands = phantom_intensity_bands();

  std::size_t w = 0;
  for (std::int64_t i0 = 0; i0 < config.dims[0]; ++i0) {
    for (std::int64_t i1 = 0; i1 < config.dims[1]; ++i1) {
      for (std::int64_t i2 = 0; i2 < config.dims[2]; ++i2, ++w) {
        const double u0 = static_cast<double>(i0) / static_cast<double>(config.dims[0]);
        const double u1 = static_cast<double>(i1) / static_cast<double>(config.dims[1]);
        const double u2 = static_cast<double>(i2) / static_cast<double>(config.dims[2]);
        const double e0 = (static_cast<double>(i0) - center[0]) / radii[0];
        const double e1 = (static_cast<double>(i1) - center[1]) / radii[1];
        const double e2 = (static_cast<double>(i2) - center[2]) / radii[2];
        const double rho = std::sqrt(e0 * e0 + e1 * e1 + e2 * e2) + deform.at(u0, u1, u2);

        std::uint8_t cls = 0;
        if (rho <= t_core) cls = 3;
        else if (rho <= t_mid) cls = 2;
        else if (rho <= t_outer) cls = 1;
        v.labels[w] = cls;

        double intensity = bands[cls];
        if (config.bias_amplitude > 0.0) intensity += bias.at(u0, u1, u2);
        if (config.noise_sigma > 0.0) intensity += config.noise_sigma * stream.next_normal();
        v.image[w] = static_cast<float>(intensity);
      }
    }
  }
  return v;
}

}  // namespace mda
