#include "msholo/tensor_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace msholo {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'H', 'T'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint32_t kEndianMarker = 0x01020304u;
constexpr std::size_t kFixedHeader = 12;

template <typename T>
void put(std::vector<std::byte>& out, T value) {
  const auto* p = reinterpret_cast<const std::byte*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const std::byte> bytes, std::size_t offset, bool swap) {
  if (offset + sizeof(T) > bytes.size()) throw FormatError("tensor header truncated");
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  if (swap) {
    auto* p = reinterpret_cast<std::byte*>(&value);
    std::reverse(p, p + sizeof(T));
  }
  return value;
}

std::size_t scalar_size(DType dtype) {
  switch (dtype) {
    case DType::f32:
    case DType::c64:
      return 4;
    case DType::f64:
    case DType::c128:
      return 8;
  }
  return 0;
}

std::size_t product(const std::vector<std::uint64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

template <typename T>
Tensor make(std::span<const T> values, std::vector<std::uint64_t> shape, DType dtype) {
  Tensor t;
  t.dtype = dtype;
  t.shape = std::move(shape);
  if (product(t.shape) * dtype_size(dtype) != values.size_bytes()) {
    throw ShapeMismatch("tensor values do not match shape");
  }
  const auto* p = reinterpret_cast<const std::byte*>(values.data());
  t.payload.assign(p, p + values.size_bytes());
  return t;
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::f32:
      return 4;
    case DType::f64:
      return 8;
    case DType::c64:
      return 8;
    case DType::c128:
      return 16;
  }
  throw FormatError("unknown dtype");
}

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::f32:
      return "f32";
    case DType::f64:
      return "f64";
    case DType::c64:
      return "c64";
    case DType::c128:
      return "c128";
  }
  return "?";
}

std::size_t Tensor::element_count() const { return product(shape); }

Tensor Tensor::from_reals(std::span<const double> values, std::vector<std::uint64_t> shape) {
  return make(values, std::move(shape), DType::f64);
}
Tensor Tensor::from_reals_f32(std::span<const float> values, std::vector<std::uint64_t> shape) {
  return make(values, std::move(shape), DType::f32);
}
Tensor Tensor::from_complex(std::span<const std::complex<double>> values, std::vector<std::uint64_t> shape) {
  return make(values, std::move(shape), DType::c128);
}
Tensor Tensor::from_complex_c64(std::span<const std::complex<float>> values, std::vector<std::uint64_t> shape) {
  return make(values, std::move(shape), DType::c64);
}

std::vector<double> Tensor::to_reals() const {
  if (dtype == DType::f64) {
    auto v = view<double>();
    return {v.begin(), v.end()};
  }
  if (dtype == DType::f32) {
    auto v = view<float>();
    return {v.begin(), v.end()};
  }
  throw FormatError(std::string("expected a real tensor, found ") + dtype_name(dtype));
}

std::vector<std::complex<double>> Tensor::to_complex() const {
  if (dtype == DType::c128) {
    auto v = view<std::complex<double>>();
    return {v.begin(), v.end()};
  }
  if (dtype == DType::c64) {
    auto v = view<std::complex<float>>();
    std::vector<std::complex<double>> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](auto z) { return std::complex<double>(z); });
    return out;
  }
  throw FormatError(std::string("expected a complex tensor, found ") + dtype_name(dtype));
}

Tensor tensor_from_field(const ComplexField2D& field) {
  return Tensor::from_complex(field.data(), {static_cast<std::uint64_t>(field.rows()),
                                             static_cast<std::uint64_t>(field.cols())});
}

Tensor tensor_from_image(const IntensityImage& image) {
  return Tensor::from_reals(image.data(), {static_cast<std::uint64_t>(image.rows()),
                                           static_cast<std::uint64_t>(image.cols())});
}

ComplexField2D field_from_tensor(const Tensor& tensor, double pitch, double wavelength) {
  if (tensor.shape.size() != 2) throw FormatError("field tensor must have rank 2");
  auto values = tensor.to_complex();
  const Shape shape{static_cast<int>(tensor.shape[0]), static_cast<int>(tensor.shape[1])};
  return ComplexField2D(shape, pitch, wavelength, ComplexField2D::Buffer(values.begin(), values.end()));
}

IntensityImage image_from_tensor(const Tensor& tensor, double pitch) {
  if (tensor.shape.size() != 2) throw FormatError("image tensor must have rank 2");
  const Shape shape{static_cast<int>(tensor.shape[0]), static_cast<int>(tensor.shape[1])};
  return IntensityImage(shape, pitch, tensor.to_reals());
}

std::vector<std::byte> encode_tensor(const Tensor& tensor) {
  if (tensor.shape.size() > 255) throw FormatError("tensor rank exceeds 255");
  if (tensor.payload.size() != tensor.element_count() * dtype_size(tensor.dtype)) {
    throw FormatError("tensor payload length does not match shape and dtype");
  }
  std::vector<std::byte> out;
  out.reserve(kFixedHeader + 8 * tensor.shape.size() + tensor.payload.size());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put<std::uint16_t>(out, kVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.dtype));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.shape.size()));
  put<std::uint32_t>(out, kEndianMarker);
  for (auto d : tensor.shape) put<std::uint64_t>(out, d);
  out.insert(out.end(), tensor.payload.begin(), tensor.payload.end());
  return out;
}

Tensor decode_tensor(std::span<const std::byte> bytes) {
  if (bytes.size() < kFixedHeader || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a tensor file (bad magic)");
  }
  std::uint32_t marker = get<std::uint32_t>(bytes, 8, false);
  bool swap = false;
  if (marker != kEndianMarker) {
    if (marker == 0x04030201u) {
      swap = true;
    } else {
      throw FormatError("tensor header has an invalid endianness marker");
    }
  }
  const auto version = get<std::uint16_t>(bytes, 4, swap);
  if (version != kVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const auto code = get<std::uint8_t>(bytes, 6, false);
  if (code > 3) throw FormatError("unknown tensor dtype code " + std::to_string(code));
  Tensor t;
  t.dtype = static_cast<DType>(code);
  const auto rank = get<std::uint8_t>(bytes, 7, false);
  std::size_t offset = kFixedHeader;
  for (int i = 0; i < rank; ++i, offset += 8) t.shape.push_back(get<std::uint64_t>(bytes, offset, swap));
  const std::size_t expected = t.element_count() * dtype_size(t.dtype);
  if (bytes.size() - offset != expected) {
    std::ostringstream os;
    os << "tensor payload is " << bytes.size() - offset << " bytes, expected " << expected;
    throw FormatError(os.str());
  }
  t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  if (swap) {
    const std::size_t w = scalar_size(t.dtype);
    for (std::size_t i = 0; i < t.payload.size(); i += w) {
      std::reverse(t.payload.begin() + static_cast<std::ptrdiff_t>(i),
                   t.payload.begin() + static_cast<std::ptrdiff_t>(i + w));
    }
  }
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  const auto bytes = encode_tensor(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(std::span(reinterpret_cast<const std::byte*>(raw.data()), raw.size()));
}

const Tensor& TensorBundle::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("bundle has no tensor named '" + name + "'");
  return it->second;
}

void write_bundle(const std::filesystem::path& directory, const TensorBundle& bundle) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "msholo-bundle";
  manifest["version"] = 1;
  manifest["metadata"] = bundle.metadata;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, tensor] : bundle.tensors) {
    const std::string file = name + ".msht";
    write_tensor(directory / file, tensor);
    files[name] = file;
  }
  manifest["tensors"] = files;
  std::ofstream out(directory / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + directory.string());
  out << manifest.dump(2) << "\n";
}

TensorBundle read_bundle(const std::filesystem::path& directory) {
  std::ifstream in(directory / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + directory.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bundle manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "msholo-bundle") throw FormatError("not an msholo bundle manifest");
  TensorBundle bundle;
  if (manifest.contains("metadata")) {
    bundle.metadata = manifest["metadata"].get<std::map<std::string, std::string>>();
  }
  for (const auto& [name, file] : manifest.at("tensors").items()) {
    bundle.tensors.emplace(name, read_tensor(directory / file.get<std::string>()));
  }
  return bundle;
}

}  // namespace msholo
