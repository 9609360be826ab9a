#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rdbm/errors.hpp"
#include "rdbm/tensor.hpp"

namespace rdbm {

inline double mse(const TensorGrid& a, const TensorGrid& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) throw ShapeError("mse: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

// 10 log10(peak^2 / MSE); +inf when the images are identical.
inline double psnr(const TensorGrid& ref, const TensorGrid& test, double peak = 1.0) {
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be > 0");
  const double e = mse(ref, test);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / e);
}

// ---------------------------------------------------------------------------
// Little-endian primitives

namespace io_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError(std::string(what) + ": truncated");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  const std::uint64_t lo = get_u32(is, what);
  const std::uint64_t hi = get_u32(is, what);
  return lo | (hi << 32);
}

inline void put_f32(std::ostream& os, double v) { put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }
inline double get_f32(std::istream& is, const char* what) {
  return static_cast<double>(std::bit_cast<float>(get_u32(is, what)));
}
inline double get_f64(std::istream& is, const char* what) { return std::bit_cast<double>(get_u64(is, what)); }

inline constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;

inline std::size_t checked_count(const std::vector<std::size_t>& dims, const char* what) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d == 0) throw FormatError(std::string(what) + ": zero dimension");
    if (n > kMaxElements / d) throw FormatError(std::string(what) + ": dimension overflow");
    n *= d;
  }
  return static_cast<std::size_t>(n);
}

template <typename Fn>
void with_output_file(const std::filesystem::path& path, Fn&& fn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  fn(os);
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return is;
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// TensorFile: "RDBT", u32 version, u32 ndim, u32 dims[ndim], f32 payload (LE).

inline constexpr std::uint32_t kTensorFileVersion = 1;

inline void write_tensor(std::ostream& os, const TensorGrid& t) {
  os.write("RDBT", 4);
  io_detail::put_u32(os, kTensorFileVersion);
  io_detail::put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (auto d : t.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw FormatError("write_tensor: dimension overflow");
    io_detail::put_u32(os, static_cast<std::uint32_t>(d));
  }
  for (double v : t.values()) io_detail::put_f32(os, v);
}

inline TensorGrid read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "RDBT", 4) != 0) {
    throw FormatError("read_tensor: bad magic");
  }
  const auto version = io_detail::get_u32(is, "read_tensor");
  if (version != kTensorFileVersion) throw FormatError("read_tensor: unsupported version " + std::to_string(version));
  const auto ndim = io_detail::get_u32(is, "read_tensor");
  if (ndim == 0 || ndim > 8) throw FormatError("read_tensor: bad rank " + std::to_string(ndim));
  std::vector<std::size_t> dims(ndim);
  for (auto& d : dims) d = io_detail::get_u32(is, "read_tensor");
  const std::size_t n = io_detail::checked_count(dims, "read_tensor");
  std::vector<double> data(n);
  for (auto& v : data) v = io_detail::get_f32(is, "read_tensor payload");
  return TensorGrid(std::move(dims), std::move(data));
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorGrid& t) {
  io_detail::with_output_file(path, [&](std::ostream& os) { write_tensor(os, t); });
}

inline TensorGrid read_tensor_file(const std::filesystem::path& path) {
  auto is = io_detail::open_input(path);
  return read_tensor(is);
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6), maxval 255. Values in [0, 1] are quantised with
// round-half-away-from-zero after clamping.

inline std::uint8_t quantize_8bit(double v) {
  const double scaled = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(scaled);
}

namespace io_detail {

inline std::size_t read_header_number(std::istream& is, const char* what) {
  int c = is.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string comment;
      std::getline(is, comment);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
    c = is.peek();
  }
  std::size_t value = 0;
  bool any = false;
  while ((c = is.peek()) != EOF && std::isdigit(c)) {
    value = value * 10 + static_cast<std::size_t>(is.get() - '0');
    if (value > (std::size_t{1} << 24)) throw FormatError(std::string(what) + ": dimension overflow");
    any = true;
  }
  if (!any) throw FormatError(std::string(what) + ": malformed header");
  return value;
}

}  // namespace io_detail

inline void write_pnm(std::ostream& os, const TensorGrid& img) {
  const auto& s = img.shape();
  const bool color = s.size() == 3 && s[2] == 3;
  if (!(s.size() == 2 || color)) throw ShapeError("write_pnm: expected {h, w} or {h, w, 3}, got " + shape_string(img));
  os << (color ? "P6" : "P5") << '\n' << s[1] << ' ' << s[0] << "\n255\n";
  std::vector<char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) bytes[i] = static_cast<char>(quantize_8bit(img[i]));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline TensorGrid read_pnm(std::istream& is) {
  std::array<char, 2> magic{};
  if (!is.read(magic.data(), 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw FormatError("read_pnm: expected P5 or P6");
  }
  const bool color = magic[1] == '6';
  const std::size_t w = io_detail::read_header_number(is, "read_pnm");
  const std::size_t h = io_detail::read_header_number(is, "read_pnm");
  const std::size_t maxval = io_detail::read_header_number(is, "read_pnm");
  if (maxval != 255) throw FormatError("read_pnm: only maxval 255 is supported");
  if (!std::isspace(is.get())) throw FormatError("read_pnm: malformed header");
  std::vector<std::size_t> shape = color ? std::vector<std::size_t>{h, w, 3} : std::vector<std::size_t>{h, w};
  const std::size_t n = io_detail::checked_count(shape, "read_pnm");
  std::vector<char> bytes(n);
  if (!is.read(bytes.data(), static_cast<std::streamsize>(n))) throw FormatError("read_pnm: truncated payload");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  return TensorGrid(std::move(shape), std::move(data));
}

inline void write_pnm_file(const std::filesystem::path& path, const TensorGrid& img) {
  io_detail::with_output_file(path, [&](std::ostream& os) { write_pnm(os, img); });
}

inline TensorGrid read_pnm_file(const std::filesystem::path& path) {
  auto is = io_detail::open_input(path);
  return read_pnm(is);
}

// Dispatch on extension: .pgm/.ppm/.pnm are images, everything else is a TensorFile.
inline bool is_pnm_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

inline TensorGrid read_image_or_tensor(const std::filesystem::path& path) {
  return is_pnm_path(path) ? read_pnm_file(path) : read_tensor_file(path);
}

inline void write_image_or_tensor(const std::filesystem::path& path, const TensorGrid& t) {
  if (is_pnm_path(path)) {
    write_pnm_file(path, t);
  } else {
    write_tensor_file(path, t);
  }
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_number(double v, int digits = 17) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream ss;
  ss.precision(digits);
  ss << v;
  return ss.str();
}

inline void write_csv(std::ostream& os, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows, int digits = 17) {
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << format_number(row[i], digits);
    os << '\n';
  }
}

// Pre-formatted fields; a field containing a comma or quote is quoted.
inline void write_csv(std::ostream& os, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  auto field = [&](const std::string& f) {
    if (f.find_first_of(",\"\n") == std::string::npos) {
      os << f;
      return;
    }
    os << '"';
    for (char ch : f) os << (ch == '"' ? "\"\"" : std::string(1, ch));
    os << '"';
  };
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      field(row[i]);
    }
    os << '\n';
  }
}

// Splits simple comma-separated text (no quoting).
inline std::vector<std::vector<std::string>> read_csv(std::istream& is) {
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    rows.push_back(std::move(fields));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// SVG line plot: one polyline per series, labelled axes, legend.

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotOptions {
  std::string title;
  std::string x_label = "t";
  std::string y_label;
  double width = 640;
  double height = 400;
  double y_clip = std::numeric_limits<double>::infinity();  // values above are dropped
};

inline void write_svg_plot(std::ostream& os, const std::vector<PlotSeries>& series, const PlotOptions& opt) {
  constexpr double kMargin = 60.0;
  static constexpr std::array<const char*, 6> kColors{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  auto usable = [&](double v) { return std::isfinite(v) && v <= opt.y_clip; };
  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo, y_lo = x_lo, y_hi = -x_lo;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!usable(s.y[i]) || !std::isfinite(s.x[i])) continue;
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, s.y[i]);
      y_hi = std::max(y_hi, s.y[i]);
    }
  }
  if (!(x_hi > x_lo)) x_hi = x_lo + 1.0;
  if (!(y_hi > y_lo)) y_hi = y_lo + 1.0;
  if (!std::isfinite(x_lo)) x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;
  const double pw = opt.width - 2 * kMargin;
  const double ph = opt.height - 2 * kMargin;
  auto px = [&](double x) { return kMargin + (x - x_lo) / (x_hi - x_lo) * pw; };
  auto py = [&](double y) { return opt.height - kMargin - (y - y_lo) / (y_hi - y_lo) * ph; };
  auto num = [](double v) { return format_number(v, 6); };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(opt.width) << "\" height=\"" << num(opt.height)
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(opt.width / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << opt.title
     << "</text>\n";
  os << "<line x1=\"" << num(kMargin) << "\" y1=\"" << num(opt.height - kMargin) << "\" x2=\""
     << num(opt.width - kMargin) << "\" y2=\"" << num(opt.height - kMargin) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << num(kMargin) << "\" y1=\"" << num(kMargin) << "\" x2=\"" << num(kMargin) << "\" y2=\""
     << num(opt.height - kMargin) << "\" stroke=\"black\"/>\n";
  os << "<text class=\"x-label\" x=\"" << num(opt.width / 2) << "\" y=\"" << num(opt.height - 16)
     << "\" text-anchor=\"middle\">" << opt.x_label << "</text>\n";
  os << "<text class=\"y-label\" x=\"16\" y=\"" << num(opt.height / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << num(opt.height / 2) << ")\">" << opt.y_label << "</text>\n";
  os << "<text x=\"" << num(kMargin) << "\" y=\"" << num(opt.height - kMargin + 16) << "\" text-anchor=\"middle\">"
     << num(x_lo) << "</text>\n";
  os << "<text x=\"" << num(opt.width - kMargin) << "\" y=\"" << num(opt.height - kMargin + 16)
     << "\" text-anchor=\"middle\">" << num(x_hi) << "</text>\n";
  os << "<text x=\"" << num(kMargin - 6) << "\" y=\"" << num(opt.height - kMargin) << "\" text-anchor=\"end\">"
     << num(y_lo) << "</text>\n";
  os << "<text x=\"" << num(kMargin - 6) << "\" y=\"" << num(kMargin + 4) << "\" text-anchor=\"end\">" << num(y_hi)
     << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % kColors.size()];
    os << "<polyline class=\"series\" data-name=\"" << s.name << "\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!usable(s.y[i])) continue;
      os << (first ? "" : " ") << num(px(s.x[i])) << ',' << num(py(s.y[i]));
      first = false;
    }
    os << "\"/>\n";
    os << "<text x=\"" << num(opt.width - kMargin + 4) << "\" y=\"" << num(kMargin + 16.0 * static_cast<double>(k))
       << "\" fill=\"" << color << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace rdbm
