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

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "otf/data.hpp"
#include "otf/error.hpp"

namespace otf::data {

namespace {

constexpr char kMagic[4] = {'O', 'T', 'F', 'D'};
constexpr std::uint32_t kSvhnTrain = 73257;
constexpr std::uint32_t kSvhnTest = 26032;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out.push_back(v); }
  void u16(std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}
  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size()) {
      throw FormatError(std::string("OTFD: truncated ") + what + " at byte offset " + std::to_string(pos));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t v = u32(what);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void append(Container& dst, const Container& src) {
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
  dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
}

}  // namespace

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "cifar10") return DatasetKind::cifar10;
  if (s == "cifar100") return DatasetKind::cifar100;
  if (s == "svhn") return DatasetKind::svhn;
  if (s == "custom") return DatasetKind::custom;
  throw ParamError("unknown dataset kind '" + std::string(s) + "' (cifar10|cifar100|svhn|custom)");
}

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::cifar100: return "cifar100";
    case DatasetKind::svhn: return "svhn";
    case DatasetKind::custom: return "custom";
  }
  return "?";
}

void Container::validate() const {
  if (channels < 1 || channels > 255 || height < 1 || height > 65535 || width < 1 || width > 65535) {
    throw FormatError("OTFD: image extents out of range");
  }
  if (num_classes < 1 || num_classes > 65535) throw FormatError("OTFD: num_classes out of range");
  if (mean.size() != static_cast<std::size_t>(channels) || std.size() != static_cast<std::size_t>(channels)) {
    throw FormatError("OTFD: need one mean/std per channel");
  }
  for (int ch = 0; ch < channels; ++ch) {
    if (!(std[static_cast<std::size_t>(ch)] > 0.0f)) {
      throw FormatError("OTFD: std of channel " + std::to_string(ch) + " must be positive");
    }
  }
  if (pixels.size() != labels.size() * image_bytes()) {
    throw FormatError("OTFD: pixel payload does not match record count");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw FormatError("OTFD: record " + std::to_string(i) + " has label " + std::to_string(labels[i]) +
                        " >= num_classes " + std::to_string(num_classes));
    }
  }
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  c.validate();
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(c.version);
  w.u32(static_cast<std::uint32_t>(c.count()));
  w.u8(static_cast<std::uint8_t>(c.channels));
  w.u16(static_cast<std::uint16_t>(c.height));
  w.u16(static_cast<std::uint16_t>(c.width));
  w.u16(static_cast<std::uint16_t>(c.num_classes));
  for (float m : c.mean) w.f32(m);
  for (float s : c.std) w.f32(s);
  w.out.reserve(w.out.size() + c.count() * (2 + c.image_bytes()));
  for (std::size_t i = 0; i < c.count(); ++i) {
    w.u16(c.labels[i]);
    const auto img = c.image(i);
    w.bytes(img.data(), img.size());
  }
  return std::move(w.out);
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("OTFD: bad magic");
  r.pos = 4;
  Container c;
  c.version = r.u32("version");
  if (c.version != Container::kVersion) {
    throw FormatError("OTFD: unsupported version " + std::to_string(c.version));
  }
  const std::uint32_t count = r.u32("count");
  c.channels = r.u8("channels");
  c.height = r.u16("height");
  c.width = r.u16("width");
  c.num_classes = r.u16("num_classes");
  for (int i = 0; i < c.channels; ++i) c.mean.push_back(r.f32("mean"));
  for (int i = 0; i < c.channels; ++i) c.std.push_back(r.f32("std"));
  const std::size_t record = 2 + c.image_bytes();
  const std::size_t expected = r.pos + static_cast<std::size_t>(count) * record;
  if (bytes.size() != expected) {
    throw FormatError("OTFD: header declares " + std::to_string(count) + " records (" +
                      std::to_string(expected) + " bytes) but file has " + std::to_string(bytes.size()) +
                      " bytes");
  }
  c.labels.resize(count);
  c.pixels.resize(static_cast<std::size_t>(count) * c.image_bytes());
  for (std::uint32_t i = 0; i < count; ++i) {
    c.labels[i] = r.u16("label");
    std::memcpy(c.pixels.data() + static_cast<std::size_t>(i) * c.image_bytes(), bytes.data() + r.pos,
                c.image_bytes());
    r.pos += c.image_bytes();
  }
  c.validate();
  return c;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path, DatasetKind kind) {
  Container c = decode_container(read_file(path));
  if (kind == DatasetKind::svhn && c.count() != kSvhnTrain && c.count() != kSvhnTest) {
    throw FormatError(path.string() + ": SVHN container has " + std::to_string(c.count()) +
                      " records; expected 73257 (train) or 26032 (test)");
  }
  return c;
}

void compute_normalization(Container& c) {
  const std::size_t plane = static_cast<std::size_t>(c.height) * c.width;
  c.mean.assign(static_cast<std::size_t>(c.channels), 0.0f);
  c.std.assign(static_cast<std::size_t>(c.channels), 1.0f);
  if (c.count() == 0) return;
  for (int ch = 0; ch < c.channels; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < c.count(); ++i) {
      const std::uint8_t* p = c.pixels.data() + i * c.image_bytes() + static_cast<std::size_t>(ch) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double v = p[j] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(c.count() * plane);
    const double mean = sum / n;
    const double var = std::max(sq / n - mean * mean, 0.0);
    c.mean[static_cast<std::size_t>(ch)] = static_cast<float>(mean);
    // Constant channels would otherwise divide by zero.
    c.std[static_cast<std::size_t>(ch)] = var > 0.0 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
}

Container decode_cifar(CifarVariant variant, std::span<const std::uint8_t> bytes, const std::string& source) {
  const std::size_t label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  constexpr std::size_t kImage = 3 * 32 * 32;
  const std::size_t record = label_bytes + kImage;
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() / record * record;
    throw FormatError(source + ": truncated record at byte offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " of " + std::to_string(record) + " bytes)");
  }
  Container c;
  c.channels = 3;
  c.height = 32;
  c.width = 32;
  c.num_classes = variant == CifarVariant::cifar10 ? 10 : 100;
  const std::size_t count = bytes.size() / record;
  c.labels.resize(count);
  c.pixels.resize(count * kImage);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    const std::uint8_t label = rec[label_bytes - 1];
    if (label >= c.num_classes) {
      throw FormatError(source + ": label " + std::to_string(label) + " out of range at byte offset " +
                        std::to_string(i * record + label_bytes - 1));
    }
    c.labels[i] = label;
    std::memcpy(c.pixels.data() + i * kImage, rec + label_bytes, kImage);
  }
  c.mean.assign(3, 0.0f);
  c.std.assign(3, 1.0f);
  return c;
}

CifarSplit import_cifar(CifarVariant variant, std::span<const std::filesystem::path> train_files,
                        std::span<const std::filesystem::path> test_files) {
  CifarSplit split;
  bool first = true;
  for (const auto& f : train_files) {
    Container part = decode_cifar(variant, read_file(f), f.string());
    if (first) {
      split.train = std::move(part);
      first = false;
    } else {
      append(split.train, part);
    }
  }
  first = true;
  for (const auto& f : test_files) {
    Container part = decode_cifar(variant, read_file(f), f.string());
    if (first) {
      split.test = std::move(part);
      first = false;
    } else {
      append(split.test, part);
    }
  }
  if (split.train.count() == 0) throw FormatError("CIFAR import: no training records");
  compute_normalization(split.train);
  split.test.channels = split.train.channels;
  split.test.height = split.train.height;
  split.test.width = split.train.width;
  split.test.num_classes = split.train.num_classes;
  split.test.mean = split.train.mean;
  split.test.std = split.train.std;
  return split;
}

Container subset(const Container& c, std::span<const int> classes, int per_class_limit) {
  Container out;
  out.version = c.version;
  out.channels = c.channels;
  out.height = c.height;
  out.width = c.width;
  out.num_classes = static_cast<int>(classes.size());
  out.mean = c.mean;
  out.std = c.std;
  std::vector<int> taken(classes.size(), 0);
  for (std::size_t i = 0; i < c.count(); ++i) {
    const auto it = std::find(classes.begin(), classes.end(), static_cast<int>(c.labels[i]));
    if (it == classes.end()) continue;
    const auto slot = static_cast<std::size_t>(it - classes.begin());
    if (per_class_limit >= 0 && taken[slot] >= per_class_limit) continue;
    ++taken[slot];
    out.labels.push_back(static_cast<std::uint16_t>(slot));
    const auto img = c.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

AugmentPolicy AugmentPolicy::for_kind(DatasetKind kind) {
  AugmentPolicy p;
  p.enabled = kind == DatasetKind::cifar10 || kind == DatasetKind::cifar100;
  return p;
}

AugmentDraw draw_augment(const AugmentPolicy& policy, std::mt19937_64& rng) {
  AugmentDraw d;
  if (!policy.enabled) return d;
  const auto range = static_cast<std::uint64_t>(2 * policy.pad + 1);
  d.offset_y = static_cast<int>(rng() % range);
  d.offset_x = static_cast<int>(rng() % range);
  d.flip = static_cast<double>(rng() >> 11) * 0x1.0p-53 < policy.flip_prob;
  return d;
}

std::vector<std::uint8_t> augment(std::span<const std::uint8_t> image, int channels, int height, int width,
                                  const AugmentPolicy& policy, const AugmentDraw& draw) {
  if (!policy.enabled) return {image.begin(), image.end()};
  const int oh = policy.crop_h, ow = policy.crop_w;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(channels) * oh * ow, 0);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      // Coordinates in the padded frame minus the pad give source coordinates.
      const int sy = y + draw.offset_y - policy.pad;
      if (sy < 0 || sy >= height) continue;
      for (int x = 0; x < ow; ++x) {
        const int px = draw.flip ? ow - 1 - x : x;
        const int sx = px + draw.offset_x - policy.pad;
        if (sx < 0 || sx >= width) continue;
        out[(static_cast<std::size_t>(c) * oh + y) * ow + x] =
            image[(static_cast<std::size_t>(c) * height + sy) * width + sx];
      }
    }
  }
  return out;
}

void normalize_image(const Container& c, std::span<const std::uint8_t> image, float* dst, bool normalize) {
  const std::size_t plane = static_cast<std::size_t>(c.height) * c.width;
  for (int ch = 0; ch < c.channels; ++ch) {
    const float mean = normalize ? c.mean[static_cast<std::size_t>(ch)] : 0.0f;
    const float inv = normalize ? 1.0f / c.std[static_cast<std::size_t>(ch)] : 1.0f;
    const std::uint8_t* src = image.data() + static_cast<std::size_t>(ch) * plane;
    float* out = dst + static_cast<std::size_t>(ch) * plane;
    for (std::size_t j = 0; j < plane; ++j) out[j] = (src[j] / 255.0f - mean) * inv;
  }
}

BatchStream::BatchStream(const Container& c, int batch_size, std::uint64_t seed, int epoch, bool normalize,
                         AugmentPolicy policy, bool shuffle)
    : c_(&c), batch_size_(batch_size), normalize_(normalize), policy_(policy) {
  if (batch_size < 1) throw ParamError("batch size must be >= 1");
  if (c.count() == 0) throw ParamError("cannot batch an empty dataset");
  if (policy.enabled && (policy.crop_h != c.height || policy.crop_w != c.width)) {
    throw ParamError("augmentation crop " + std::to_string(policy.crop_h) + "x" + std::to_string(policy.crop_w) +
                     " does not match " + std::to_string(c.height) + "x" + std::to_string(c.width) + " images");
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x0a7du};
  std::mt19937_64 order_rng(seq);
  aug_rng_.seed(order_rng());
  order_.resize(c.count());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::uint32_t>(i);
  if (shuffle) {
    for (std::size_t i = order_.size() - 1; i > 0; --i) {
      const std::size_t j = order_rng() % (i + 1);
      std::swap(order_[i], order_[j]);
    }
  }
}

std::size_t BatchStream::num_batches() const {
  return (order_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
}

bool BatchStream::next(Batch& out) {
  if (pos_ >= order_.size()) return false;
  const std::size_t n = std::min(static_cast<std::size_t>(batch_size_), order_.size() - pos_);
  const Container& c = *c_;
  out.images = Tensor(Shape{static_cast<int>(n), c.channels, c.height, c.width});
  out.labels.resize(n);
  out.indices.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t idx = order_[pos_ + i];
    out.indices[i] = idx;
    out.labels[i] = c.labels[idx];
    float* dst = out.images.ptr() + i * c.image_bytes();
    if (policy_.enabled) {
      const AugmentDraw draw = draw_augment(policy_, aug_rng_);
      const auto img = augment(c.image(idx), c.channels, c.height, c.width, policy_, draw);
      normalize_image(c, img, dst, normalize_);
    } else {
      normalize_image(c, c.image(idx), dst, normalize_);
    }
  }
  pos_ += n;
  return true;
}

}  // namespace otf::data
