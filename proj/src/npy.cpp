#include "pvmc/npy.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pvmc/errors.hpp"

// Minimal NPY v1.0 reader/writer. Only little-endian float32/float64,
// C-order, up to 4 dimensions -- everything this toolkit persists.

namespace pvmc {

namespace {

bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

std::string header_dict(const std::string& descr,
                        const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "{'descr': '" << descr << "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << shape[i];
    if (shape.size() == 1 || i + 1 < shape.size()) os << ",";
    if (i + 1 < shape.size()) os << " ";
  }
  os << "), }";
  return os.str();
}

void write_raw(const std::string& path, const std::string& descr,
               const std::vector<std::size_t>& shape, const void* data,
               std::size_t elem_size, std::size_t count) {
  if (!host_is_little_endian())
    throw IoError("npy_save: big-endian hosts are not supported");
  std::string dict = header_dict(descr, shape);
  // magic(6) + version(2) + hlen(2) + dict, padded so total % 64 == 0
  std::size_t unpadded = 10 + dict.size() + 1;
  std::size_t padded = (unpadded + 63) / 64 * 64;
  dict.append(padded - unpadded, ' ');
  dict.push_back('\n');

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("npy_save: cannot open " + path);
  const unsigned char magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  f.write(reinterpret_cast<const char*>(magic), 8);
  const std::uint16_t hlen = static_cast<std::uint16_t>(dict.size());
  f.write(reinterpret_cast<const char*>(&hlen), 2);
  f.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  f.write(reinterpret_cast<const char*>(data),
          static_cast<std::streamsize>(elem_size * count));
  if (!f) throw IoError("npy_save: write failed for " + path);
}

std::size_t find_key(const std::string& hdr, const std::string& key,
                     const std::string& path) {
  const std::size_t pos = hdr.find(key);
  if (pos == std::string::npos)
    throw IoError("npy_load: malformed header in " + path);
  return pos;
}

}  // namespace

NpyArray npy_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("npy_load: cannot open " + path);
  unsigned char magic[8];
  f.read(reinterpret_cast<char*>(magic), 8);
  if (!f || magic[0] != 0x93 || std::memcmp(magic + 1, "NUMPY", 5) != 0)
    throw IoError("npy_load: not a npy file: " + path);
  std::uint32_t hlen = 0;
  if (magic[6] == 1) {
    std::uint16_t h16 = 0;
    f.read(reinterpret_cast<char*>(&h16), 2);
    hlen = h16;
  } else {
    f.read(reinterpret_cast<char*>(&hlen), 4);
  }
  std::string hdr(hlen, '\0');
  f.read(hdr.data(), hlen);
  if (!f) throw IoError("npy_load: truncated header in " + path);

  NpyArray out;
  {
    std::size_t p = find_key(hdr, "'descr'", path);
    p = hdr.find('\'', p + 7);
    std::size_t q = hdr.find('\'', p + 1);
    out.dtype = hdr.substr(p + 1, q - p - 1);
  }
  if (out.dtype != "<f4" && out.dtype != "<f8")
    throw IoError("npy_load: unsupported dtype " + out.dtype + " in " + path);
  {
    const std::size_t p = find_key(hdr, "'fortran_order'", path);
    if (hdr.find("False", p) == std::string::npos)
      throw IoError("npy_load: fortran-order arrays unsupported: " + path);
  }
  {
    std::size_t p = find_key(hdr, "'shape'", path);
    p = hdr.find('(', p);
    const std::size_t q = hdr.find(')', p);
    std::string tup = hdr.substr(p + 1, q - p - 1);
    std::istringstream ts(tup);
    std::string item;
    while (std::getline(ts, item, ',')) {
      bool any_digit = false;
      for (char c : item) any_digit = any_digit || (c >= '0' && c <= '9');
      if (any_digit) out.shape.push_back(std::stoul(item));
    }
  }

  const std::size_t n = out.numel();
  out.data.resize(n);
  if (out.dtype == "<f4") {
    std::vector<float> buf(n);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(n * sizeof(float)));
    if (!f) throw IoError("npy_load: truncated data in " + path);
    for (std::size_t i = 0; i < n; ++i) out.data[i] = buf[i];
  } else {
    f.read(reinterpret_cast<char*>(out.data.data()),
           static_cast<std::streamsize>(n * sizeof(double)));
    if (!f) throw IoError("npy_load: truncated data in " + path);
  }
  return out;
}

void npy_save(const std::string& path, const std::vector<std::size_t>& shape,
              const float* data) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  write_raw(path, "<f4", shape, data, sizeof(float), n);
}

void npy_save(const std::string& path, const std::vector<std::size_t>& shape,
              const double* data) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  write_raw(path, "<f8", shape, data, sizeof(double), n);
}

}  // namespace pvmc
