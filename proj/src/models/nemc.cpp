#include <limits>

#include "common/binio.hpp"
#include "nem/models.hpp"

namespace nem {

std::vector<std::uint8_t> encode_nemc(const NamedTensors& tensors) {
  detail::ByteWriter w;
  w.bytes("NEMC", 4);
  w.le<std::uint32_t>(kNemcVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("NEMC: tensor name too long: " + name.substr(0, 40) + "...");
    }
    if (t.ndim() > 255) throw FormatError("NEMC: tensor '" + name + "' has too many axes");
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.ndim()));
    for (std::size_t d : t.shape()) {
      if (d > std::numeric_limits<std::uint32_t>::max()) {
        throw FormatError("NEMC: dimension too large in '" + name + "'");
      }
      w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    }
    for (float v : t.values()) w.f32(v);
  }
  return std::move(w.buffer());
}

NamedTensors decode_nemc(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "NEMC");
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "NEMC", 4) != 0) r.fail("bad magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kNemcVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>("tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.le<std::uint16_t>("name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "name");
    const auto ndim = r.le<std::uint8_t>("rank");
    Shape shape(ndim);
    for (auto& d : shape) d = r.le<std::uint32_t>("dimension");
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / 4) r.fail("truncated tensor data for '" + name + "'");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32("tensor data");
    out.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

void write_nemc(const std::string& path, const NamedTensors& tensors) {
  detail::write_file(path, encode_nemc(tensors));
}

NamedTensors read_nemc(const std::string& path) { return decode_nemc(detail::read_file(path)); }

}  // namespace nem
