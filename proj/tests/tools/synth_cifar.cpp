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

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "synthetic.hpp"

// synth_cifar <out.bin> <per_class> <seed> [tint jitter grating noise]
int main(int argc, char** argv) {
  if (argc != 4 && argc != 8) {
    std::cerr << "usage: synth_cifar <out.bin> <per_class> <seed> [tint jitter grating noise]\n";
    return 2;
  }
  synth::Style s;
  if (argc == 8) {
    s.tint = std::atof(argv[4]);
    s.tint_jitter = std::atof(argv[5]);
    s.grating = std::atof(argv[6]);
    s.noise = std::atof(argv[7]);
  }
  const auto bytes = synth::cifar10_records(std::atoi(argv[2]), 10, std::strtoull(argv[3], nullptr, 10), s);
  std::ofstream f(argv[1], std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return f ? 0 : 1;
}
