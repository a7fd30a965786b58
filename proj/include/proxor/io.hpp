#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "proxor/data.hpp"

namespace proxor {

// CSV schema: required header with columns a, y, z1..zp, w1..wr, optional
// x1..xd (a bare z/w/x is accepted as the first block column). Values are
// decimal reals; a and y must be 0 or 1. Numbers are parsed and written in
// shortest round-trip form, so a read-write cycle preserves values exactly.

namespace detail {

struct ColumnRef {
  enum class Block { A, Y, Z, W, X } block;
  int index = 0;  // position within the block
};

inline bool parse_block_column(const std::string& name, ColumnRef& out) {
  if (name == "a") {
    out = {ColumnRef::Block::A, 0};
    return true;
  }
  if (name == "y") {
    out = {ColumnRef::Block::Y, 0};
    return true;
  }
  if (name.empty()) return false;
  ColumnRef::Block b;
  switch (name[0]) {
    case 'z': b = ColumnRef::Block::Z; break;
    case 'w': b = ColumnRef::Block::W; break;
    case 'x': b = ColumnRef::Block::X; break;
    default: return false;
  }
  if (name.size() == 1) {
    out = {b, 0};
    return true;
  }
  int idx = 0;
  const char* first = name.data() + 1;
  const char* last = name.data() + name.size();
  auto [p, ec] = std::from_chars(first, last, idx);
  if (ec != std::errc() || p != last || idx < 1) return false;
  out = {b, idx - 1};
  return true;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  std::size_t e = s.find_last_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline SelectedSample read_sample_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(Errc::ParseError, "empty input");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);

  std::vector<std::string> header = detail::split_csv_line(line);
  std::vector<detail::ColumnRef> refs(header.size());
  int nz = 0, nw = 0, nx = 0;
  bool has_a = false, has_y = false;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = detail::trim(header[c]);
    detail::ColumnRef ref;
    if (!detail::parse_block_column(name, ref))
      fail(Errc::ParseError, "unknown column '" + name + "' in header");
    refs[c] = ref;
    switch (ref.block) {
      case detail::ColumnRef::Block::A: has_a = true; break;
      case detail::ColumnRef::Block::Y: has_y = true; break;
      case detail::ColumnRef::Block::Z: nz = std::max(nz, ref.index + 1); break;
      case detail::ColumnRef::Block::W: nw = std::max(nw, ref.index + 1); break;
      case detail::ColumnRef::Block::X: nx = std::max(nx, ref.index + 1); break;
    }
  }
  if (!has_a || !has_y) fail(Errc::ParseError, "header must contain columns a and y");
  if (nz == 0 || nw == 0) fail(Errc::ParseError, "header must contain z and w proxy columns");

  std::vector<double> av, yv;
  std::vector<std::vector<double>> zv, wv, xv;
  Eigen::Index row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      fail(Errc::ParseError, "row " + std::to_string(row) + " has " +
                                 std::to_string(cells.size()) + " cells, expected " +
                                 std::to_string(header.size()));
    std::vector<double> zr(nz), wr(nw), xr(nx);
    double a = 0, y = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = detail::trim(cells[c]);
      double value = 0.0;
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      auto [p, ec] = std::from_chars(first, last, value);
      if (ec != std::errc() || p != last)
        fail(Errc::ParseError, "row " + std::to_string(row) + ", column " +
                                   detail::trim(header[c]) + ": cannot parse '" + cell + "'");
      switch (refs[c].block) {
        case detail::ColumnRef::Block::A: a = value; break;
        case detail::ColumnRef::Block::Y: y = value; break;
        case detail::ColumnRef::Block::Z: zr[refs[c].index] = value; break;
        case detail::ColumnRef::Block::W: wr[refs[c].index] = value; break;
        case detail::ColumnRef::Block::X: xr[refs[c].index] = value; break;
      }
    }
    av.push_back(a);
    yv.push_back(y);
    zv.push_back(zr);
    wv.push_back(wr);
    xv.push_back(xr);
  }

  const Eigen::Index n = static_cast<Eigen::Index>(av.size());
  SelectedSample s;
  s.a = Eigen::Map<VectorXd>(av.data(), n);
  s.y = Eigen::Map<VectorXd>(yv.data(), n);
  s.z.resize(n, nz);
  s.w.resize(n, nw);
  s.x.resize(n, nx);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < nz; ++j) s.z(i, j) = zv[i][j];
    for (int j = 0; j < nw; ++j) s.w(i, j) = wv[i][j];
    for (int j = 0; j < nx; ++j) s.x(i, j) = xv[i][j];
  }
  return s;
}

inline SelectedSample read_sample_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::ParseError, "cannot open '" + path + "'");
  return read_sample_csv(in);
}

inline std::string format_double(double v) {
  char buf[64];
  // shortest representation that round-trips a double
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = 0.0;
    std::from_chars(buf, buf + std::char_traits<char>::length(buf), back);
    if (back == v) return buf;
  }
  return buf;
}

inline void write_sample_csv(std::ostream& out, const SelectedSample& s) {
  out << "a,y";
  for (Eigen::Index j = 0; j < s.z.cols(); ++j) out << ",z" << (j + 1);
  for (Eigen::Index j = 0; j < s.w.cols(); ++j) out << ",w" << (j + 1);
  for (Eigen::Index j = 0; j < s.x.cols(); ++j) out << ",x" << (j + 1);
  out << "\n";
  for (Eigen::Index i = 0; i < s.n(); ++i) {
    out << format_double(s.a(i)) << "," << format_double(s.y(i));
    for (Eigen::Index j = 0; j < s.z.cols(); ++j) out << "," << format_double(s.z(i, j));
    for (Eigen::Index j = 0; j < s.w.cols(); ++j) out << "," << format_double(s.w(i, j));
    for (Eigen::Index j = 0; j < s.x.cols(); ++j) out << "," << format_double(s.x(i, j));
    out << "\n";
  }
}

inline void write_sample_csv_file(const std::string& path, const SelectedSample& s) {
  std::ofstream out(path);
  if (!out) fail(Errc::ParseError, "cannot open '" + path + "' for writing");
  write_sample_csv(out, s);
}

}  // namespace proxor
