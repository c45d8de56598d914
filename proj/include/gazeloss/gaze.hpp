#pragma once

#include "gazeloss/common.hpp"
#include "gazeloss/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace gazeloss {

/// Recording geometry: screen extent in pixels and in visual degrees.
struct ScreenGeometry {
  double width_px = 1280.0;
  double height_px = 840.0;
  double width_deg = 44.6;
  double height_deg = 28.5;

  double px_per_degree_x() const { return width_px / width_deg; }
  double px_per_degree_y() const { return height_px / height_deg; }

  void validate() const {
    if (width_px <= 0 || height_px <= 0 || width_deg <= 0 || height_deg <= 0)
      throw ValidationError("screen geometry fields must be strictly positive");
  }
};

/// One gaze sample in screen pixel coordinates (origin top-left).
struct Fixation {
  int64_t frame_id = 0;
  double x = 0;
  double y = 0;
  double weight = 1.0;
};

/// Dense nonnegative attention grid. After rendering, either all-zero (no
/// fixations) or max-normalized so the largest entry is exactly 1.
template <typename S = float>
struct GazeHeatmap {
  GridX<S> grid;

  int rows() const { return static_cast<int>(grid.rows()); }
  int cols() const { return static_cast<int>(grid.cols()); }
  bool any_positive() const { return grid.size() > 0 && grid.maxCoeff() > S(0); }
};

/// Four consecutive grayscale frames with values in [0,1].
template <typename S = float>
struct FrameStack {
  std::array<GridX<S>, 4> frames;

  int rows() const { return static_cast<int>(frames[0].rows()); }
  int cols() const { return static_cast<int>(frames[0].cols()); }

  void validate() const {
    for (const auto& f : frames)
      if (f.rows() != frames[0].rows() || f.cols() != frames[0].cols())
        throw DimensionError("frame stack requires identical per-frame dimensions");
  }

  Tensor<S> as_tensor() const {
    Tensor<S> t = Tensor<S>::zeros({4, rows(), cols()});
    const int64_t plane = static_cast<int64_t>(rows()) * cols();
    for (int i = 0; i < 4; ++i)
      Eigen::Map<GridX<S>>(t.data() + i * plane, rows(), cols()) = frames[i];
    return t;
  }
};

// ---------------------------------------------------------------------------
// Fixation log parsing. CSV with header `frame_id,x,y` plus an optional
// `weight` column.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline double parse_number(const std::string& cell, int line_no, int col_no) {
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (cell.empty() || end != cell.c_str() + cell.size())
    throw ParseError("non-numeric cell '" + cell + "' at line " + std::to_string(line_no) +
                     ", column " + std::to_string(col_no));
  return v;
}

}  // namespace detail

/// Parses and validates a fixation log, grouping rows by frame_id. Rows with
/// coordinates outside [0, width_px) x [0, height_px) are rejected together,
/// with their line numbers listed.
inline std::map<int64_t, std::vector<Fixation>> parse_fixation_log(std::istream& is,
                                                                   const ScreenGeometry& geom,
                                                                   const std::string& origin) {
  geom.validate();
  std::string line;
  if (!std::getline(is, line)) throw FormatError(origin + ": empty file, expected header");
  auto header = detail::split_csv_line(line);
  bool has_weight = false;
  if (header.size() == 4 && header[3] == "weight") {
    has_weight = true;
  } else if (header.size() != 3) {
    throw FormatError(origin + ": header must be 'frame_id,x,y' or 'frame_id,x,y,weight'");
  }
  if (header[0] != "frame_id" || header[1] != "x" || header[2] != "y")
    throw FormatError(origin + ": header must be 'frame_id,x,y' or 'frame_id,x,y,weight'");

  std::map<int64_t, std::vector<Fixation>> grouped;
  std::vector<int> bad_lines;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    const size_t want = has_weight ? 4 : 3;
    if (cells.size() != want)
      throw ParseError(origin + ": line " + std::to_string(line_no) + " has " +
                       std::to_string(cells.size()) + " cells, expected " + std::to_string(want));
    Fixation f;
    const double id = detail::parse_number(cells[0], line_no, 1);
    f.frame_id = static_cast<int64_t>(id);
    f.x = detail::parse_number(cells[1], line_no, 2);
    f.y = detail::parse_number(cells[2], line_no, 3);
    f.weight = has_weight ? detail::parse_number(cells[3], line_no, 4) : 1.0;
    const bool in_bounds = f.frame_id >= 0 && f.x >= 0 && f.x < geom.width_px && f.y >= 0 &&
                           f.y < geom.height_px && f.weight >= 0;
    if (!in_bounds) {
      bad_lines.push_back(line_no);
      continue;
    }
    grouped[f.frame_id].push_back(f);
  }
  if (!bad_lines.empty()) {
    std::ostringstream os;
    os << origin << ": " << bad_lines.size() << " row(s) out of bounds for " << geom.width_px
       << "x" << geom.height_px << " screen, at line(s)";
    for (int ln : bad_lines) os << ' ' << ln;
    throw ValidationError(os.str());
  }
  return grouped;
}

inline std::map<int64_t, std::vector<Fixation>> parse_fixation_log(const std::string& path,
                                                                   const ScreenGeometry& geom) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open fixation log " + path);
  return parse_fixation_log(is, geom, path);
}

// ---------------------------------------------------------------------------
// Heatmap rendering and resampling.
// ---------------------------------------------------------------------------

/// Renders fixations onto an out_h x out_w grid. Each fixation deposits a
/// Gaussian whose standard deviation is one visual degree per axis
/// (sigma_px = px/degree), scaled into grid units; the weighted sum is then
/// divided by its maximum. Grid cells sample at their centers; the Gaussian
/// is truncated at 4 sigma per axis.
template <typename S = float>
GazeHeatmap<S> render_heatmap(std::span<const Fixation> fixations, const ScreenGeometry& geom,
                              int out_h, int out_w) {
  geom.validate();
  if (out_h < 1 || out_w < 1) throw ContractError("render_heatmap: output resolution must be >= 1");
  GridX<S> acc = GridX<S>::Zero(out_h, out_w);
  const double scale_x = out_w / geom.width_px;   // grid cells per screen pixel
  const double scale_y = out_h / geom.height_px;
  const double sig_cx = geom.px_per_degree_x() * scale_x;
  const double sig_cy = geom.px_per_degree_y() * scale_y;

  std::vector<double> wy, wx;
  for (const Fixation& f : fixations) {
    // Fixation position in grid coordinates (cell c center sits at c + 0.5).
    const double u = f.x * scale_x - 0.5;
    const double v = f.y * scale_y - 0.5;
    const int r0 = std::max(0, static_cast<int>(std::ceil(v - 4.0 * sig_cy)));
    const int r1 = std::min(out_h - 1, static_cast<int>(std::floor(v + 4.0 * sig_cy)));
    const int c0 = std::max(0, static_cast<int>(std::ceil(u - 4.0 * sig_cx)));
    const int c1 = std::min(out_w - 1, static_cast<int>(std::floor(u + 4.0 * sig_cx)));
    if (r0 > r1 || c0 > c1) continue;
    wy.resize(r1 - r0 + 1);
    wx.resize(c1 - c0 + 1);
    for (int r = r0; r <= r1; ++r) {
      const double d = (r - v) / sig_cy;
      wy[r - r0] = std::exp(-0.5 * d * d);
    }
    for (int c = c0; c <= c1; ++c) {
      const double d = (c - u) / sig_cx;
      wx[c - c0] = std::exp(-0.5 * d * d);
    }
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c)
        acc(r, c) += static_cast<S>(f.weight * wy[r - r0] * wx[c - c0]);
  }
  const S mx = acc.size() ? acc.maxCoeff() : S(0);
  if (mx > S(0)) acc /= mx;
  return GazeHeatmap<S>{std::move(acc)};
}

namespace detail {

/// th x sh matrix of fractional row overlaps for area-weighted averaging;
/// rows sum to 1.
template <typename S>
GridX<S> overlap_weights(int source, int target) {
  GridX<S> m = GridX<S>::Zero(target, source);
  const double span = static_cast<double>(source) / target;
  for (int i = 0; i < target; ++i) {
    const double lo = i * span;
    const double hi = (i + 1) * span;
    for (int r = static_cast<int>(std::floor(lo)); r < source; ++r) {
      if (r >= hi) break;
      const double w = std::min(hi, static_cast<double>(r + 1)) - std::max(lo, static_cast<double>(r));
      if (w > 0) m(i, r) = static_cast<S>(w / span);
    }
  }
  return m;
}

}  // namespace detail

/// Area-weighted average pooling onto the target grid, followed by
/// re-max-normalization (all-zero maps stay all-zero).
template <typename S>
GazeHeatmap<S> resample_heatmap(const GazeHeatmap<S>& map, int target_h, int target_w) {
  if (target_h < 1 || target_w < 1)
    throw ContractError("resample_heatmap: target resolution must be >= 1");
  const GridX<S> ry = detail::overlap_weights<S>(map.rows(), target_h);
  const GridX<S> rc = detail::overlap_weights<S>(map.cols(), target_w);
  GridX<S> out = (ry.matrix() * map.grid.matrix() * rc.matrix().transpose()).array();
  const S mx = out.maxCoeff();
  if (mx > S(0)) out /= mx;
  return GazeHeatmap<S>{std::move(out)};
}

/// |last - first| of a frame stack, min-max normalized onto [0,1]. An
/// identically-zero difference yields the all-zero map.
template <typename S>
GazeHeatmap<S> motion_heatmap(const FrameStack<S>& stack) {
  stack.validate();
  GridX<S> d = (stack.frames[3] - stack.frames[0]).abs();
  const S mn = d.minCoeff();
  const S mx = d.maxCoeff();
  if (mx == mn) {
    if (mx == S(0)) return GazeHeatmap<S>{GridX<S>::Zero(d.rows(), d.cols())};
    return GazeHeatmap<S>{GridX<S>::Ones(d.rows(), d.cols())};
  }
  d = (d - mn) / (mx - mn);
  return GazeHeatmap<S>{std::move(d)};
}

// ---------------------------------------------------------------------------
// Heatmap and frame I/O: binary PGM (P5, 8 bit) and full-precision CSV.
// ---------------------------------------------------------------------------

enum class HeatmapFormat { Pgm, Csv };

template <typename S>
void write_pgm(const std::string& path, const GridX<S>& grid) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "P5\n" << grid.cols() << ' ' << grid.rows() << "\n255\n";
  for (Eigen::Index r = 0; r < grid.rows(); ++r)
    for (Eigen::Index c = 0; c < grid.cols(); ++c) {
      const double v = std::clamp(static_cast<double>(grid(r, c)), 0.0, 1.0);
      os.put(static_cast<char>(std::lround(255.0 * v)));
    }
  if (!os) throw IoError("write failed for " + path);
}

template <typename S>
GridX<S> read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw FormatError(path + ": expected binary PGM (P5)");
  long w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (!is || w < 1 || h < 1 || maxval < 1 || maxval > 255)
    throw FormatError(path + ": bad PGM header");
  is.get();  // single whitespace after maxval
  std::vector<char> buf(static_cast<size_t>(w) * h);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size()))
    throw FormatError(path + ": truncated PGM payload");
  GridX<S> g(h, w);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c)
      g(r, c) = static_cast<S>(static_cast<unsigned char>(buf[r * w + c])) / static_cast<S>(maxval);
  return g;
}

template <typename S>
void write_heatmap_csv(const std::string& path, const GridX<S>& grid) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  char buf[64];
  for (Eigen::Index r = 0; r < grid.rows(); ++r) {
    for (Eigen::Index c = 0; c < grid.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.*g", std::numeric_limits<float>::max_digits10,
                    static_cast<double>(grid(r, c)));
      if (c) os << ',';
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

template <typename S>
GridX<S> read_heatmap_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<std::vector<S>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    std::vector<S> row;
    row.reserve(cells.size());
    for (size_t c = 0; c < cells.size(); ++c)
      row.push_back(static_cast<S>(detail::parse_number(cells[c], line_no, static_cast<int>(c + 1))));
    if (!rows.empty() && row.size() != rows.front().size())
      throw FormatError(path + ": ragged row at line " + std::to_string(line_no));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path + ": empty heatmap CSV");
  GridX<S> g(rows.size(), rows.front().size());
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows.front().size(); ++c) g(r, c) = rows[r][c];
  return g;
}

template <typename S>
void export_heatmap(const GazeHeatmap<S>& map, const std::string& path, HeatmapFormat format) {
  if (format == HeatmapFormat::Pgm)
    write_pgm(path, map.grid);
  else
    write_heatmap_csv(path, map.grid);
}

}  // namespace gazeloss
