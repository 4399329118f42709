/* Copyright (c) 2026 The otfnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include "otf/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "otf/error.hpp"

namespace otf::app {
namespace {

constexpr char kMagic[4] = {'P', 'M', 'K', 'D'};
constexpr std::size_t kChecksumBytes = 8;

void put_u(std::vector<std::uint8_t>& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::size_t end) : buf_(b), end_(end) {}
  std::uint64_t u(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = buf_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > end_) {
      throw FormatError(std::string("checkpoint: truncated ") + what + " at byte offset " + std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors) {
  std::set<std::string> seen;
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u(out, kCheckpointVersion, 4);
  put_u(out, tensors.size(), 4);
  for (const NamedTensor& t : tensors) {
    if (!seen.insert(t.name).second) throw FormatError("checkpoint: duplicate tensor name '" + t.name + "'");
    if (t.name.empty() || t.name.size() > 0xffff) throw FormatError("checkpoint: bad tensor name length");
    put_u(out, t.name.size(), 2);
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(0);  // dtype f32
    const Shape& s = t.value.shape();
    out.push_back(static_cast<std::uint8_t>(s.rank()));
    for (int d : s.extents()) put_u(out, static_cast<std::uint32_t>(d), 4);
    for (float f : t.value.data()) {
      std::uint32_t v;
      std::memcpy(&v, &f, 4);
      put_u(out, v, 4);
    }
  }
  put_u(out, fnv1a64(out), 8);
  return out;
}

std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic (expected \"PMKD\")");
  }
  if (bytes.size() < 4 + kChecksumBytes) {
    throw ChecksumError("checkpoint: checksum mismatch (file is " + std::to_string(bytes.size()) + " bytes)");
  }
  const std::size_t body = bytes.size() - kChecksumBytes;
  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < kChecksumBytes; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (fnv1a64(bytes.first(body)) != stored) {
    throw ChecksumError("checkpoint: checksum mismatch (file truncated or corrupted)");
  }

  Reader r(bytes, body);
  r.take(4, "magic");
  const auto version = static_cast<std::uint32_t>(r.u(4, "version"));
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = static_cast<std::uint32_t>(r.u(4, "tensor count"));
  std::vector<NamedTensor> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = static_cast<std::size_t>(r.u(2, "name length"));
    const auto nb = r.take(len, "name");
    NamedTensor t;
    t.name.assign(nb.begin(), nb.end());
    if (!seen.insert(t.name).second) throw FormatError("checkpoint: duplicate tensor name '" + t.name + "'");
    const auto dtype = r.u(1, "dtype");
    if (dtype != 0) throw FormatError("checkpoint: tensor '" + t.name + "' has unsupported dtype " + std::to_string(dtype));
    const auto rank = static_cast<int>(r.u(1, "rank"));
    if (rank < 1 || rank > Shape::kMaxRank) {
      throw FormatError("checkpoint: tensor '" + t.name + "' has rank " + std::to_string(rank));
    }
    std::vector<int> dims;
    for (int d = 0; d < rank; ++d) dims.push_back(static_cast<int>(r.u(4, "dims")));
    Shape shape(dims);
    std::vector<float> values(shape.numel());
    const auto payload = r.take(values.size() * 4, "payload");
    std::memcpy(values.data(), payload.data(), payload.size());
    t.value = Tensor(shape, std::move(values));
    out.push_back(std::move(t));
  }
  if (r.pos() != body) {
    throw FormatError("checkpoint: " + std::to_string(body - r.pos()) + " stray bytes before the checksum");
  }
  return out;
}

std::vector<NamedTensor> model_tensors(const nn::Model& model, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const Parameter& p : model.params()) out.push_back({prefix + p.name, p.value});
  return out;
}

void load_tensors(nn::Model& model, std::span<const NamedTensor> tensors, const std::string& prefix) {
  std::vector<const NamedTensor*> matched;
  for (Parameter& p : model.params()) {
    const std::string want = prefix + p.name;
    const NamedTensor* hit = nullptr;
    for (const NamedTensor& t : tensors) {
      if (t.name == want) {
        hit = &t;
        break;
      }
    }
    if (!hit) throw MismatchError("checkpoint has no tensor '" + want + "' required by " + model.spec().id());
    if (hit->value.shape() != p.value.shape()) {
      throw MismatchError("shape mismatch at '" + want + "': model expects " + p.value.shape().str() +
                          ", checkpoint has " + hit->value.shape().str());
    }
    matched.push_back(hit);
  }
  if (prefix.empty() && matched.size() != tensors.size()) {
    for (const NamedTensor& t : tensors) {
      bool used = false;
      for (const NamedTensor* m : matched) used = used || m == &t;
      if (!used) throw MismatchError("checkpoint tensor '" + t.name + "' does not exist in " + model.spec().id());
    }
  }
  std::size_t i = 0;
  for (Parameter& p : model.params()) {
    p.value = matched[i++]->value;
    p.zero_grad();
  }
}

void write_checkpoint(std::span<const NamedTensor> tensors, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_bytes(path));
  } catch (const ChecksumError& e) {
    throw ChecksumError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_checkpoint(const nn::Model& model, const std::filesystem::path& path) {
  write_checkpoint(model_tensors(model), path);
}

nn::Model load_checkpoint(const std::filesystem::path& path, const nn::ArchSpec& spec, nn::FilterMode mode,
                          nn::SurgeryMode surgery) {
  nn::Model m = nn::build(spec, mode, surgery);
  load_tensors(m, read_checkpoint(path));
  return m;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < kChecksumBytes) throw ChecksumError(path.string() + ": too short for a checksum");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < kChecksumBytes; ++i) {
    v |= static_cast<std::uint64_t>(bytes[bytes.size() - kChecksumBytes + i]) << (8 * i);
  }
  return v;
}

}  // namespace otf::app
