// SPDX-License-Identifier: Apache-2.0
//
// Image input for tests and the CLI: the CGIMG text format.
// Header line "CGIMG C H W", then C*H*W whitespace-separated decimal floats
// in [0,1], channel-major then row-major.

#pragma once

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "minivlm/errors.hpp"

namespace minivlm {

struct ImageGrid {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // normalized to [0,1]

    ImageGrid() = default;

    ImageGrid(std::size_t c, std::size_t h, std::size_t w, std::vector<double> vals)
        : channels(c), height(h), width(w), values(std::move(vals)) {
        if (c < 1 || h < 1 || w < 1 || values.size() != c * h * w)
            throw ShapeMismatch("image dimensions do not match value count");
        for (double v : values)
            if (!(v >= 0.0 && v <= 1.0)) throw IoError("image value outside [0,1]");
    }

    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return values[(c * height + y) * width + x];
    }
};

inline ImageGrid parse_cgimg(std::istream& in) {
    std::string magic;
    std::size_t c = 0, h = 0, w = 0;
    if (!(in >> magic >> c >> h >> w) || magic != "CGIMG") throw IoError("bad CGIMG header");
    std::vector<double> vals(c * h * w);
    for (double& v : vals)
        if (!(in >> v)) throw IoError("CGIMG truncated");
    return ImageGrid(c, h, w, std::move(vals));
}

inline ImageGrid load_cgimg(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open image: " + path);
    return parse_cgimg(f);
}

inline void write_cgimg(std::ostream& out, const ImageGrid& img) {
    out.precision(17);  // lossless double round-trip
    out << "CGIMG " << img.channels << " " << img.height << " " << img.width << "\n";
    for (std::size_t i = 0; i < img.values.size(); ++i)
        out << img.values[i] << ((i + 1) % img.width == 0 ? "\n" : " ");
}

inline void save_cgimg(const std::string& path, const ImageGrid& img) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open image for write: " + path);
    write_cgimg(f, img);
}

}  // namespace minivlm
