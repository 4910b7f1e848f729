#pragma once

// Mask and frame files: binary PGM ("P5", 0 = background, 255 = foreground),
// binary PPM ("P6") frames, and run-length JSON mask sequences.

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "panokit/errors.hpp"
#include "panokit/geometry.hpp"

namespace panokit {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace detail {

struct PnmHeader {
  std::size_t width = 0, height = 0, maxval = 0, data_offset = 0;
};

// Parses "Px <w> <h> <maxval>" followed by exactly one whitespace byte; '#' comments allowed.
inline PnmHeader parse_pnm_header(const std::string& b, const char* magic) {
  if (b.size() < 2 || b.compare(0, 2, magic) != 0) throw ParseError(std::string("expected magic ") + magic, 0);
  std::size_t pos = 2;
  auto skip = [&] {
    while (pos < b.size()) {
      if (std::isspace(static_cast<unsigned char>(b[pos]))) {
        ++pos;
      } else if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + static_cast<std::size_t>(b[pos] - '0');
      if (v > (1u << 24)) throw ParseError(std::string(what) + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("expected ") + what, start);
    return v;
  };
  PnmHeader h;
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (h.width == 0 || h.height == 0) throw ParseError("zero image size", pos);
  if (h.maxval != 255) throw ParseError("maxval must be 255", pos);
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos])))
    throw ParseError("expected whitespace after header", pos);
  h.data_offset = pos + 1;
  return h;
}

}  // namespace detail

inline std::string encode_pgm(const BinaryMask& m) {
  std::string out = "P5\n" + std::to_string(m.width()) + " " + std::to_string(m.height()) + "\n255\n";
  const std::size_t head = out.size();
  out.resize(head + m.size());
  for (std::size_t k = 0; k < m.size(); ++k) out[head + k] = m[k] ? static_cast<char>(255) : '\0';
  return out;
}

/// Pixels >= 128 are foreground.
inline BinaryMask decode_pgm(const std::string& bytes) {
  const auto h = detail::parse_pnm_header(bytes, "P5");
  const std::size_t n = h.width * h.height;
  if (bytes.size() - h.data_offset < n) throw ParseError("truncated pixel data", bytes.size());
  std::vector<std::uint8_t> d(n);
  for (std::size_t k = 0; k < n; ++k) d[k] = static_cast<unsigned char>(bytes[h.data_offset + k]) >= 128 ? 1 : 0;
  return BinaryMask(h.height, h.width, std::move(d));
}

inline void write_pgm(const std::string& path, const BinaryMask& m) { write_file(path, encode_pgm(m)); }
inline BinaryMask read_pgm(const std::string& path) { return decode_pgm(read_file(path)); }

/// [3,H,W] in [0,1] -> 8-bit RGB.
inline std::string encode_ppm(const Tensor<double>& img) {
  require_rank(img, 3, "encode_ppm");
  if (img.dim(0) != 3) throw DimensionError("encode_ppm: expected 3 channels");
  const std::size_t h = img.dim(1), w = img.dim(2), hw = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t head = out.size();
  out.resize(head + 3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(img[c * hw + p], 0.0, 1.0);
      out[head + 3 * p + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
  return out;
}

inline Tensor<double> decode_ppm(const std::string& bytes) {
  const auto h = detail::parse_pnm_header(bytes, "P6");
  const std::size_t hw = h.width * h.height;
  if (bytes.size() - h.data_offset < 3 * hw) throw ParseError("truncated pixel data", bytes.size());
  Tensor<double> img({3, h.height, h.width});
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img[c * hw + p] = static_cast<unsigned char>(bytes[h.data_offset + 3 * p + c]) / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// RLE-JSON

/// Row-major foreground runs as flat [start, len, start, len, ...].
inline std::vector<std::size_t> mask_runs(const BinaryMask& m) {
  std::vector<std::size_t> runs;
  std::size_t k = 0;
  while (k < m.size()) {
    if (!m[k]) {
      ++k;
      continue;
    }
    const std::size_t start = k;
    while (k < m.size() && m[k]) ++k;
    runs.push_back(start);
    runs.push_back(k - start);
  }
  return runs;
}

struct IndexedMask {
  std::size_t idx = 0;
  BinaryMask mask;
};

inline std::string encode_rle_json(const std::vector<IndexedMask>& frames) {
  if (frames.empty()) throw DimensionError("encode_rle_json: no frames");
  const std::size_t h = frames[0].mask.height(), w = frames[0].mask.width();
  nlohmann::ordered_json doc;
  doc["h"] = h;
  doc["w"] = w;
  doc["frames"] = nlohmann::ordered_json::array();
  for (const auto& f : frames) {
    if (f.mask.height() != h || f.mask.width() != w) throw DimensionError("encode_rle_json: frames differ in size");
    nlohmann::ordered_json fr;
    fr["idx"] = f.idx;
    fr["runs"] = mask_runs(f.mask);
    doc["frames"].push_back(std::move(fr));
  }
  return doc.dump() + "\n";
}

namespace detail {
// Byte offset of the n-th occurrence of `key` (quoted) in the text, for error reports.
inline std::size_t key_offset(const std::string& text, const std::string& key, std::size_t n) {
  const std::string q = "\"" + key + "\"";
  std::size_t pos = 0;
  for (std::size_t k = 0; k <= n; ++k) {
    const std::size_t p = text.find(q, k == 0 ? 0 : pos + 1);
    if (p == std::string::npos) return pos;
    pos = p;
  }
  return pos;
}
}  // namespace detail

inline std::vector<IndexedMask> decode_rle_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  auto dim = [&](const char* key) {
    if (!doc.is_object() || !doc.contains(key) || !doc[key].is_number_unsigned() || doc[key].get<std::size_t>() == 0)
      throw ParseError(std::string("header field \"") + key + "\" must be a positive integer",
                       detail::key_offset(text, key, 0));
    return doc[key].get<std::size_t>();
  };
  const std::size_t h = dim("h"), w = dim("w"), n = h * w;
  if (!doc.contains("frames") || !doc["frames"].is_array())
    throw ParseError("header field \"frames\" must be an array", detail::key_offset(text, "frames", 0));
  std::vector<IndexedMask> out;
  std::size_t k = 0;
  for (const auto& fr : doc["frames"]) {
    const std::size_t where = detail::key_offset(text, "runs", k);
    if (!fr.is_object() || !fr.contains("idx") || !fr["idx"].is_number_unsigned() || !fr.contains("runs") ||
        !fr["runs"].is_array())
      throw ParseError("frame " + std::to_string(k) + " needs unsigned \"idx\" and array \"runs\"", where);
    const auto& runs = fr["runs"];
    if (runs.size() % 2) throw ParseError("frame " + std::to_string(k) + ": odd run list length", where);
    std::vector<std::uint8_t> d(n, 0);
    std::size_t end = 0;
    for (std::size_t r = 0; r < runs.size(); r += 2) {
      if (!runs[r].is_number_unsigned() || !runs[r + 1].is_number_unsigned())
        throw ParseError("frame " + std::to_string(k) + ": runs must be unsigned integers", where);
      const std::size_t s = runs[r].get<std::size_t>(), len = runs[r + 1].get<std::size_t>();
      if (len == 0 || (r > 0 && s <= end) || s >= n || len > n - s)
        throw ParseError("frame " + std::to_string(k) + ": run " + std::to_string(r / 2) +
                             " is empty, overlapping, unordered or out of range",
                         where);
      std::fill(d.begin() + static_cast<long>(s), d.begin() + static_cast<long>(s + len), 1);
      end = s + len;
    }
    out.push_back({fr["idx"].get<std::size_t>(), BinaryMask(h, w, std::move(d))});
    ++k;
  }
  return out;
}

}  // namespace panokit
