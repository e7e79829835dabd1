#include "agecycle/synthetic_faces.hpp"

#include <array>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>

#include "agecycle/errors.hpp"
#include "agecycle/image_io.hpp"

namespace agecycle {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// k-th uniform draw in [lo, hi) for a subject.
double uniform(std::uint64_t seed, int k, double lo, double hi) {
  const std::uint64_t bits = mix(mix(seed) + static_cast<std::uint64_t>(k) * 0xD1B54A32D192ED03ULL);
  const double u = static_cast<double>(bits >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

using Rgb = std::array<double, 3>;

struct Identity {
  Rgb background;
  Rgb skin;
  Rgb hair;
  Rgb eye;
  double cx, cy, ax, ay;
  double hairline;
  double eye_spacing;
  double mouth_half_width;
};

Identity identity_from_seed(std::uint64_t seed) {
  Identity id{};
  for (int c = 0; c < 3; ++c) {
    id.background[static_cast<std::size_t>(c)] = uniform(seed, c, -0.7, -0.2);
  }
  const double tone = uniform(seed, 3, 0.0, 1.0);
  id.skin = {-0.05 + 0.55 * tone + uniform(seed, 4, -0.05, 0.05),
             -0.20 + 0.45 * tone + uniform(seed, 5, -0.05, 0.05),
             -0.30 + 0.35 * tone + uniform(seed, 6, -0.05, 0.05)};
  const double hair = uniform(seed, 7, 0.0, 1.0);
  id.hair = {-0.85 + 0.45 * hair, -0.88 + 0.30 * hair, -0.90 + 0.15 * hair};
  const double eye = uniform(seed, 8, 0.0, 1.0);
  id.eye = {-0.9 + 0.2 * eye, -0.85 + 0.25 * eye, -0.8 + 0.4 * eye};
  id.cx = 0.5 + uniform(seed, 9, -0.01, 0.01);
  id.cy = uniform(seed, 10, 0.51, 0.53);
  id.ax = uniform(seed, 11, 0.30, 0.36);
  id.ay = uniform(seed, 12, 0.40, 0.44);
  id.hairline = id.cy - id.ay * uniform(seed, 13, 0.75, 0.90);
  id.eye_spacing = uniform(seed, 14, 0.11, 0.16);
  id.mouth_half_width = uniform(seed, 15, 0.08, 0.13);
  return id;
}

bool in_ellipse(double u, double v, double cx, double cy, double rx, double ry) {
  const double du = (u - cx) / rx;
  const double dv = (v - cy) / ry;
  return du * du + dv * dv <= 1.0;
}

/// Pixel-space layout of the aging operator at a given resolution.
struct OperatorLayout {
  int period;
  int forehead_row0, forehead_rows, forehead_col0, forehead_cols;
  int mouth_row0, mouth_rows, mouth_col0, mouth_cols;
  int arc_row0, arc_row1;  // inclusive range
  int arc_width;

  explicit OperatorLayout(int r)
      : period(r / 16),
        forehead_row0(r / 4),
        forehead_rows(2 * (r / 16)),
        forehead_col0(22 * r / 64),
        forehead_cols(20 * r / 64),
        mouth_row0(50 * r / 64),
        mouth_rows(r / 16),
        mouth_col0(26 * r / 64),
        mouth_cols(12 * r / 64),
        arc_row0(35 * r / 64),
        arc_row1(46 * r / 64 + (r / 64 - 1)),
        arc_width(std::max(1, r / 64)) {}

  /// Column of the left/right laugh-line arc on `row`.
  std::pair<int, int> arc_columns(int row, int r) const {
    const double v = (row + 0.5) / r;
    const double t = std::clamp((v - 0.55) / 0.17, 0.0, 1.0);
    const double offset = 0.15 + 0.06 * t;
    return {static_cast<int>(std::floor((0.5 - offset) * r)),
            static_cast<int>(std::floor((0.5 + offset) * r))};
  }

  bool on_arc(int row, int col, int r) const {
    if (row < arc_row0 || row > arc_row1) {
      return false;
    }
    const auto [left, right] = arc_columns(row, r);
    return (col >= left && col < left + arc_width) || (col >= right && col < right + arc_width);
  }
};

void check_resolution(int r) {
  if (r < 64 || r % 64 != 0) {
    throw InvalidInput("procedural faces need a resolution that is a positive multiple of 64");
  }
}

}  // namespace

double wrinkle_amplitude(int group, int n_groups) {
  if (n_groups < 2 || group < 0 || group >= n_groups) {
    throw InvalidInput("wrinkle_amplitude: group out of range");
  }
  return 0.15 * static_cast<double>(group) / static_cast<double>(n_groups - 1);
}

torch::Tensor render_procedural_face(const ProceduralFaceSpec& spec) {
  check_resolution(spec.resolution);
  const int r = spec.resolution;
  const Identity id = identity_from_seed(spec.subject_seed);
  const double amp = wrinkle_amplitude(spec.group, spec.n_groups);
  const OperatorLayout layout(r);

  auto image = torch::empty({3, r, r}, torch::kFloat32);
  auto acc = image.accessor<float, 3>();
  for (int y = 0; y < r; ++y) {
    const double v = (y + 0.5) / r;
    for (int x = 0; x < r; ++x) {
      const double u = (x + 0.5) / r;
      Rgb px = id.background;
      const bool in_face = in_ellipse(u, v, id.cx, id.cy, id.ax, id.ay);
      if (v < id.hairline && in_ellipse(u, v, id.cx, id.cy, id.ax + 0.03, id.ay + 0.03)) {
        px = id.hair;
      } else if (in_face) {
        px = id.skin;
        const double eye_v = id.cy - id.ay * 0.18;
        if (in_ellipse(u, v, id.cx - id.eye_spacing, eye_v, 0.045, 0.03) ||
            in_ellipse(u, v, id.cx + id.eye_spacing, eye_v, 0.045, 0.03)) {
          px = id.eye;
        } else if (in_ellipse(u, v, id.cx, id.cy + 0.06, 0.025, 0.05)) {
          px = {id.skin[0] - 0.08, id.skin[1] - 0.08, id.skin[2] - 0.08};
        } else if (in_ellipse(u, v, id.cx, id.cy + id.ay * 0.5, id.mouth_half_width, 0.018)) {
          px = {id.skin[0] + 0.15, id.skin[1] - 0.20, id.skin[2] - 0.15};
        }
      }

      // Aging operator: additive luminance change inside its fixed support.
      double delta = 0.0;
      const bool forehead = y >= layout.forehead_row0 &&
                            y < layout.forehead_row0 + layout.forehead_rows &&
                            x >= layout.forehead_col0 &&
                            x < layout.forehead_col0 + layout.forehead_cols;
      const bool mouth = y >= layout.mouth_row0 && y < layout.mouth_row0 + layout.mouth_rows &&
                         x >= layout.mouth_col0 && x < layout.mouth_col0 + layout.mouth_cols;
      if (forehead || mouth) {
        const int row0 = forehead ? layout.forehead_row0 : layout.mouth_row0;
        delta = amp * std::sin(2.0 * std::numbers::pi * (y - row0 + 0.5) / layout.period);
      } else if (layout.on_arc(y, x, r)) {
        delta = -0.6 * amp;
      }
      for (int c = 0; c < 3; ++c) {
        acc[c][y][x] = static_cast<float>(std::clamp(px[static_cast<std::size_t>(c)] + delta, -1.0, 1.0));
      }
    }
  }
  return image;
}

torch::Tensor aging_operator_support(int resolution) {
  check_resolution(resolution);
  const OperatorLayout layout(resolution);
  auto mask = torch::zeros({resolution, resolution}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const bool forehead = y >= layout.forehead_row0 &&
                            y < layout.forehead_row0 + layout.forehead_rows &&
                            x >= layout.forehead_col0 &&
                            x < layout.forehead_col0 + layout.forehead_cols;
      const bool mouth = y >= layout.mouth_row0 && y < layout.mouth_row0 + layout.mouth_rows &&
                         x >= layout.mouth_col0 && x < layout.mouth_col0 + layout.mouth_cols;
      acc[y][x] = forehead || mouth || layout.on_arc(y, x, resolution);
    }
  }
  return mask;
}

double wrinkle_energy(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3 || image.size(1) != image.size(2)) {
    throw InvalidInput("wrinkle_energy: expected a square [3, R, R] image");
  }
  const int r = static_cast<int>(image.size(1));
  check_resolution(r);
  const OperatorLayout layout(r);
  const auto luma = image.detach().to(torch::kFloat64).mean(0).contiguous();
  const auto acc = luma.accessor<double, 2>();

  double energy = 0.0;
  int columns = 0;
  auto band = [&](int row0, int rows, int col0, int cols) {
    for (int x = col0; x < col0 + cols; ++x) {
      std::complex<double> coeff = 0.0;
      for (int k = 0; k < rows; ++k) {
        const double phase = -2.0 * std::numbers::pi * k / layout.period;
        coeff += acc[row0 + k][x] * std::complex<double>(std::cos(phase), std::sin(phase));
      }
      const double amplitude = 2.0 * std::abs(coeff) / rows;
      energy += amplitude * amplitude;
      ++columns;
    }
  };
  band(layout.forehead_row0, layout.forehead_rows, layout.forehead_col0, layout.forehead_cols);
  band(layout.mouth_row0, layout.mouth_rows, layout.mouth_col0, layout.mouth_cols);
  return energy / columns;
}

int synthetic_age(std::uint64_t subject_seed, int group) {
  return 21 + 10 * group + static_cast<int>(mix(subject_seed ^ 0xA5A5A5A5ULL) % 10);
}

std::uint64_t synthetic_subject_seed(std::uint64_t dataset_seed, int index) {
  return mix(dataset_seed * 1000003ULL + static_cast<std::uint64_t>(index));
}

std::string synthetic_subject_id(std::uint64_t subject_seed) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "s%016llx", static_cast<unsigned long long>(subject_seed));
  return buf;
}

std::vector<FaceRecord> write_synthetic_dataset(const std::filesystem::path& out_dir,
                                                int n_subjects, int n_groups, int resolution,
                                                std::uint64_t seed) {
  if (n_subjects < 1) {
    throw InvalidInput("synthetic dataset needs at least one subject");
  }
  if (n_groups < 2) {
    throw InvalidInput("synthetic dataset needs at least 2 age groups (training requires >= 2)");
  }
  check_resolution(resolution);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) {
    throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  }
  const auto scheme = GroupScheme::decades(n_groups);
  std::vector<FaceRecord> records;
  for (int i = 0; i < n_subjects; ++i) {
    const auto subject_seed = synthetic_subject_seed(seed, i);
    const auto id = synthetic_subject_id(subject_seed);
    for (int g = 0; g < n_groups; ++g) {
      const auto image = render_procedural_face({subject_seed, g, n_groups, resolution});
      const auto rel = std::filesystem::path("images") / (id + "_g" + std::to_string(g) + ".png");
      write_png(out_dir / rel, image_to_mat(image));
      FaceRecord rec;
      rec.subject_id = id;
      rec.image_path = out_dir / rel;
      rec.age_years = synthetic_age(subject_seed, g);
      rec.group = assign_age_group(rec.age_years, scheme);
      records.push_back(std::move(rec));
    }
  }
  write_manifest(out_dir / "manifest.csv", records);
  return records;
}

}  // namespace agecycle
