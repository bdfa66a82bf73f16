#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace diffcap {

// Square RGB image with channel values in [0,1], row-major, 3 channels.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, 0.0) {}

    double& at(int x, int y, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }

    void fill(double r, double g, double b) {
        for (size_t i = 0; i < pixels.size(); i += 3) {
            pixels[i] = r;
            pixels[i + 1] = g;
            pixels[i + 2] = b;
        }
    }
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

std::vector<unsigned char> encode_png(const Image& img);
Image decode_png(const std::vector<unsigned char>& bytes);

}  // namespace diffcap
