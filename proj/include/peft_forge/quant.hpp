#pragma once

// Blockwise 4-bit NormalFloat (NF4) quantization for frozen weights and
// blockwise linear 8-bit quantization for optimizer moments and for the
// second-level ("double") quantization of NF4 block scales.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "peft_forge/binary_io.hpp"

namespace peft::quant {

inline constexpr std::size_t kNf4BlockSize = 64;
inline constexpr std::size_t kQ8BlockSize = 256;
inline constexpr std::size_t kScaleGroupSize = 256;
inline constexpr int kQ8MaxCode = 127;

using Nf4Codebook = std::array<float, 16>;

// The 16 NF4 levels, strictly increasing, endpoints -1 and +1, level 7 exactly 0.
const Nf4Codebook& nf4_codebook() noexcept;
inline constexpr std::uint8_t kNf4ZeroCode = 7;

// Largest distance between adjacent codebook levels.
float nf4_max_gap() noexcept;

// Index of the level closest to `normalized`; ties go to the lower index.
std::uint8_t nearest_nf4_code(double normalized) noexcept;

struct Q8Block {
    std::vector<std::int8_t> codes;
    float absmax = 0.0f;

    friend bool operator==(const Q8Block&, const Q8Block&) = default;
};

// code = round(127 * x / absmax), half away from zero. Throws QuantError on
// non-finite input or block_size == 0. An empty input yields no blocks.
std::vector<Q8Block> quantize_q8(std::span<const float> values,
                                 std::size_t block_size = kQ8BlockSize);

// value = code / 127 * absmax. Throws IntegrityError when the blocks do not
// hold exactly num_elements codes or a code is -128.
std::vector<float> dequantize_q8(std::span<const Q8Block> blocks, std::size_t num_elements);

// Per group: fp32 mean plus a Q8 block of (scale - mean).
struct DoubleQuantizedScales {
    std::uint32_t group_size = static_cast<std::uint32_t>(kScaleGroupSize);
    std::vector<float> group_means;
    std::vector<Q8Block> deviations;  // one block per group

    std::size_t count() const noexcept;
    friend bool operator==(const DoubleQuantizedScales&, const DoubleQuantizedScales&) = default;
};

DoubleQuantizedScales double_quantize_scales(std::span<const float> scales,
                                             std::size_t group_size = kScaleGroupSize);
// Restored scales are clamped at zero.
std::vector<float> restore_scales(const DoubleQuantizedScales& dq);

enum class ScaleEncoding : std::uint8_t { PlainFp32 = 0, DoubleQuantized = 1 };

class QuantizedTensor {
public:
    QuantizedTensor() = default;

    // Builds a tensor from one code per element (values must be 0..15) and
    // plain fp32 block scales. Throws IntegrityError on bad codes or counts.
    static QuantizedTensor from_codes(std::vector<std::size_t> shape, std::size_t block_size,
                                      std::span<const std::uint8_t> codes,
                                      std::vector<float> scales);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t num_elements() const noexcept { return num_elements_; }
    std::size_t block_size() const noexcept { return block_size_; }
    std::size_t num_blocks() const noexcept;
    ScaleEncoding scale_encoding() const noexcept { return encoding_; }

    std::uint8_t code(std::size_t i) const noexcept {
        const std::uint8_t byte = packed_codes_[i / 2];
        return (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    }
    const std::vector<std::uint8_t>& packed_codes() const noexcept { return packed_codes_; }

    // Scales used for reconstruction (restored ones when double-quantized).
    std::vector<float> effective_scales() const;
    const std::vector<float>& plain_scales() const noexcept { return plain_scales_; }
    const DoubleQuantizedScales& compressed_scales() const noexcept { return dq_scales_; }

    // Same codes, scales moved into double-quantized storage.
    QuantizedTensor with_double_quantized_scales(std::size_t group_size = kScaleGroupSize) const;

    // Bytes needed to store codes and scales (header excluded).
    std::size_t storage_bytes() const noexcept;

    void serialize(ByteWriter& out) const;
    static QuantizedTensor deserialize(ByteReader& in);

    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;

private:
    friend QuantizedTensor quantize_nf4(std::span<const float>, std::vector<std::size_t>,
                                        std::size_t);

    std::vector<std::size_t> shape_;
    std::size_t num_elements_ = 0;
    std::size_t block_size_ = kNf4BlockSize;
    ScaleEncoding encoding_ = ScaleEncoding::PlainFp32;
    std::vector<std::uint8_t> packed_codes_;  // low nibble = even index
    std::vector<float> plain_scales_;         // used when PlainFp32
    DoubleQuantizedScales dq_scales_;         // used when DoubleQuantized
};

// Blockwise absmax NF4 quantization with plain fp32 scales. The shape's product
// must equal values.size(). Throws QuantError on non-finite input, an empty
// tensor, or block_size == 0.
QuantizedTensor quantize_nf4(std::span<const float> values, std::vector<std::size_t> shape,
                             std::size_t block_size = kNf4BlockSize);

inline QuantizedTensor quantize_nf4(std::span<const float> values,
                                    std::size_t block_size = kNf4BlockSize) {
    return quantize_nf4(values, {values.size()}, block_size);
}

std::vector<float> dequantize_nf4(const QuantizedTensor& q);

struct QuantErrorStats {
    double max_abs_err = 0.0;
    double mean_abs_err = 0.0;
    double mse = 0.0;
};

// Statistics of original - dequantize_nf4(q). Throws ShapeError on size mismatch.
QuantErrorStats quant_error_stats(std::span<const float> original, const QuantizedTensor& q);

}  // namespace peft::quant
