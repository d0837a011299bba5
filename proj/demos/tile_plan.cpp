// Prints the sliding-window plan for a volume: per-axis offsets, tile count and forward passes.
//
//   semiseg_demo_tile_plan D H W P [step_fraction] [mirror_axes]
//   semiseg_demo_tile_plan 128 128 128 80 0.5 1,2

#include <cstdlib>
#include <iostream>
#include <string>

#include "semiseg/inference.hpp"

using namespace semiseg;

int main(int argc, char** argv) {
  if (argc < 5) {
    std::cerr << "usage: semiseg_demo_tile_plan D H W PATCH [step_fraction] [mirror_axes]\n";
    return 2;
  }
  try {
    const Extent3 extent{std::stoi(argv[1]), std::stoi(argv[2]), std::stoi(argv[3])};
    const int p = std::stoi(argv[4]);
    InferenceConfig cfg;
    cfg.patch_size = {p, p, p};
    cfg.step_fraction = argc > 5 ? std::stod(argv[5]) : 0.5;
    cfg.mirror_axes = argc > 6 ? parse_mirror_axes(argv[6]) : std::vector<int>{};
    cfg.validate();

    const char* names[] = {"depth", "height", "width"};
    for (int a = 0; a < 3; ++a) {
      std::cout << names[a] << ':';
      for (int o : axis_offsets(extent[a], cfg.patch_size[a], cfg.step_fraction)) std::cout << ' ' << o;
      std::cout << '\n';
    }
    const std::size_t tiles = tile_positions(extent, cfg.patch_size, cfg.step_fraction).size();
    const std::size_t flips = std::size_t{1} << cfg.mirror_axes.size();
    std::cout << "tiles: " << tiles << "\nforward passes: " << tiles * flips << " (" << flips << " per tile)\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
