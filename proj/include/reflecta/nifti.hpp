#pragma once

// NIfTI-1 single-file reader/writer (.nii and .nii.gz).
//
// Supported on-disk types: uint8, int16, float32, float64. Everything is
// converted to float32 in memory. Volumes whose orientation matrix is not
// axis aligned are rejected; axis-aligned ones are permuted so that index
// axes run (left-right, anterior-posterior, inferior-superior).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "reflecta/error.hpp"
#include "reflecta/volume.hpp"

namespace reflecta::nifti {

enum class DataType : std::int16_t {
    UInt8 = 2,
    Int16 = 4,
    Float32 = 16,
    Float64 = 64,
};

inline constexpr std::int16_t kIntentDisplacementVector = 1006;

/// Header fields the library reads or writes. The rest are zero on write.
struct Header {
    std::array<std::int16_t, 8> dim{};
    std::array<float, 8> pixdim{};
    std::int16_t intent_code = 0;
    DataType datatype = DataType::Float32;
    float vox_offset = 352.0f;
    float scl_slope = 0.0f;
    float scl_inter = 0.0f;
    std::int16_t qform_code = 0;
    std::int16_t sform_code = 0;
    std::array<float, 3> quatern{};  // b, c, d
    std::array<float, 3> qoffset{};
    std::array<std::array<float, 4>, 3> srow{};
};

/// Raw N-dimensional image as stored on disk, converted to float.
struct RawImage {
    Header header;
    std::vector<float> data;
};

namespace detail {

inline bool has_gz_suffix(const std::filesystem::path& path)
{
    const auto s = path.string();
    return s.size() >= 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
}

template <typename T>
T read_at(const unsigned char* buf, std::size_t offset, bool swap)
{
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf + offset, sizeof(T));
    if (swap)
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
            std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
}

template <typename T>
void write_at(unsigned char* buf, std::size_t offset, T v)
{
    std::memcpy(buf + offset, &v, sizeof(T));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path))
        throw IoError("file not found: " + path.string());
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f)
        throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes;
    unsigned char chunk[1 << 16];
    for (;;) {
        const int n = gzread(f, chunk, sizeof(chunk));
        if (n < 0) {
            gzclose(f);
            throw FormatError("corrupt compressed stream in " + path.string());
        }
        if (n == 0)
            break;
        bytes.insert(bytes.end(), chunk, chunk + n);
    }
    gzclose(f);
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes)
{
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.string().c_str(), "wb6");
        if (!f)
            throw IoError("cannot write " + path.string());
        const int n = gzwrite(f, bytes.data(), unsigned(bytes.size()));
        const int rc = gzclose(f);
        if (n != int(bytes.size()) || rc != Z_OK)
            throw IoError("short write to " + path.string());
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out)
        throw IoError("short write to " + path.string());
}

inline int bytes_per_voxel(DataType t)
{
    switch (t) {
    case DataType::UInt8: return 1;
    case DataType::Int16: return 2;
    case DataType::Float32: return 4;
    case DataType::Float64: return 8;
    }
    return 0;
}

} // namespace detail

/// Parse any NIfTI-1 file of a supported data type without geometric checks.
inline RawImage read_raw(const std::filesystem::path& path)
{
    const auto bytes = detail::read_file_bytes(path);
    if (bytes.size() < 348)
        throw FormatError("truncated NIfTI header in " + path.string());
    const unsigned char* b = bytes.data();

    bool swap = false;
    std::int32_t sizeof_hdr = detail::read_at<std::int32_t>(b, 0, false);
    if (sizeof_hdr != 348) {
        swap = true;
        sizeof_hdr = detail::read_at<std::int32_t>(b, 0, true);
        if (sizeof_hdr != 348)
            throw FormatError("not a NIfTI-1 file (sizeof_hdr) : " + path.string());
    }
    if (std::memcmp(b + 344, "n+1", 4) != 0)
        throw FormatError("unsupported NIfTI magic (need single-file \"n+1\"): " + path.string());

    RawImage img;
    Header& h = img.header;
    for (int i = 0; i < 8; ++i) {
        h.dim[i] = detail::read_at<std::int16_t>(b, 40 + 2 * i, swap);
        h.pixdim[i] = detail::read_at<float>(b, 76 + 4 * i, swap);
    }
    h.intent_code = detail::read_at<std::int16_t>(b, 68, swap);
    const auto dt = detail::read_at<std::int16_t>(b, 70, swap);
    switch (dt) {
    case 2: case 4: case 16: case 64: h.datatype = DataType(dt); break;
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(dt) + " in " + path.string());
    }
    h.vox_offset = detail::read_at<float>(b, 108, swap);
    h.scl_slope = detail::read_at<float>(b, 112, swap);
    h.scl_inter = detail::read_at<float>(b, 116, swap);
    h.qform_code = detail::read_at<std::int16_t>(b, 252, swap);
    h.sform_code = detail::read_at<std::int16_t>(b, 254, swap);
    for (int i = 0; i < 3; ++i) {
        h.quatern[i] = detail::read_at<float>(b, 256 + 4 * i, swap);
        h.qoffset[i] = detail::read_at<float>(b, 268 + 4 * i, swap);
    }
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            h.srow[r][c] = detail::read_at<float>(b, 280 + 16 * r + 4 * c, swap);

    if (h.dim[0] < 1 || h.dim[0] > 7)
        throw FormatError("corrupt NIfTI header (dim[0]=" + std::to_string(h.dim[0]) + ") in " + path.string());
    std::size_t count = 1;
    for (int i = 1; i <= h.dim[0]; ++i) {
        if (h.dim[i] <= 0)
            throw FormatError("corrupt NIfTI header (non-positive dim) in " + path.string());
        count *= std::size_t(h.dim[i]);
    }
    const auto offset = std::size_t(h.vox_offset);
    if (h.vox_offset < 348.0f || offset + count * std::size_t(detail::bytes_per_voxel(h.datatype)) > bytes.size())
        throw FormatError("NIfTI data section truncated in " + path.string());

    img.data.resize(count);
    const unsigned char* p = b + offset;
    for (std::size_t i = 0; i < count; ++i) {
        switch (h.datatype) {
        case DataType::UInt8: img.data[i] = float(p[i]); break;
        case DataType::Int16: img.data[i] = float(detail::read_at<std::int16_t>(p, 2 * i, swap)); break;
        case DataType::Float32: img.data[i] = detail::read_at<float>(p, 4 * i, swap); break;
        case DataType::Float64: img.data[i] = float(detail::read_at<double>(p, 8 * i, swap)); break;
        }
    }
    if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f))
        for (auto& v : img.data)
            v = v * h.scl_slope + h.scl_inter;
    for (float v : img.data)
        if (!std::isfinite(v))
            throw FormatError("non-finite voxel value in " + path.string());
    return img;
}

/// Serialize a raw image. Values must be exactly representable in `h.datatype`.
inline void write_raw(const RawImage& img, const std::filesystem::path& path)
{
    const Header& h = img.header;
    std::size_t count = 1;
    for (int i = 1; i <= h.dim[0]; ++i)
        count *= std::size_t(h.dim[i]);
    if (count != img.data.size())
        throw ShapeError("NIfTI write: data length does not match header dims");

    const int bpv = detail::bytes_per_voxel(h.datatype);
    std::vector<unsigned char> bytes(352 + count * std::size_t(bpv), 0);
    unsigned char* b = bytes.data();
    detail::write_at<std::int32_t>(b, 0, 348);
    b[39] = 0;
    for (int i = 0; i < 8; ++i) {
        detail::write_at<std::int16_t>(b, 40 + 2 * i, h.dim[i]);
        detail::write_at<float>(b, 76 + 4 * i, h.pixdim[i]);
    }
    detail::write_at<std::int16_t>(b, 68, h.intent_code);
    detail::write_at<std::int16_t>(b, 70, std::int16_t(h.datatype));
    detail::write_at<std::int16_t>(b, 72, std::int16_t(8 * bpv));
    detail::write_at<float>(b, 108, 352.0f);
    detail::write_at<float>(b, 112, h.scl_slope);
    detail::write_at<float>(b, 116, h.scl_inter);
    b[123] = 2; // mm
    detail::write_at<std::int16_t>(b, 252, h.qform_code);
    detail::write_at<std::int16_t>(b, 254, h.sform_code);
    for (int i = 0; i < 3; ++i) {
        detail::write_at<float>(b, 256 + 4 * i, h.quatern[i]);
        detail::write_at<float>(b, 268 + 4 * i, h.qoffset[i]);
    }
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            detail::write_at<float>(b, 280 + 16 * r + 4 * c, h.srow[r][c]);
    std::memcpy(b + 344, "n+1\0", 4);

    unsigned char* p = b + 352;
    for (std::size_t i = 0; i < count; ++i) {
        const float v = img.data[i];
        switch (h.datatype) {
        case DataType::UInt8: {
            if (!(v >= 0.0f && v <= 255.0f && std::floor(v) == v))
                throw FormatError("value " + std::to_string(v) + " not representable as uint8");
            p[i] = static_cast<unsigned char>(v);
            break;
        }
        case DataType::Int16: {
            if (!(v >= -32768.0f && v <= 32767.0f && std::floor(v) == v))
                throw FormatError("value " + std::to_string(v) + " not representable as int16");
            detail::write_at<std::int16_t>(p, 2 * i, static_cast<std::int16_t>(v));
            break;
        }
        case DataType::Float32: detail::write_at<float>(p, 4 * i, v); break;
        case DataType::Float64: detail::write_at<double>(p, 8 * i, double(v)); break;
        }
    }
    detail::write_file_bytes(path, bytes);
}

namespace detail {

// Voxel-to-world 3x3 linear part from sform, qform or pixdim.
inline std::array<std::array<double, 3>, 3> orientation_matrix(const Header& h)
{
    std::array<std::array<double, 3>, 3> m{};
    if (h.sform_code > 0) {
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                m[r][c] = h.srow[r][c];
        return m;
    }
    if (h.qform_code > 0) {
        const double b = h.quatern[0], c = h.quatern[1], d = h.quatern[2];
        const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
        const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
        const double R[3][3] = {
            {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b},
        };
        for (int r = 0; r < 3; ++r)
            for (int col = 0; col < 3; ++col)
                m[r][col] = R[r][col] * (col == 2 ? qfac : 1.0);
        return m;
    }
    for (int i = 0; i < 3; ++i)
        m[i][i] = 1.0;
    return m;
}

} // namespace detail

/// Load a 3D volume, permuted to canonical axis order.
inline Volume3D load_nifti(const std::filesystem::path& path)
{
    RawImage raw = read_raw(path);
    const Header& h = raw.header;
    if (h.dim[0] != 3)
        throw FormatError("expected a 3D image but header declares " + std::to_string(h.dim[0]) +
                          " dimensions: " + path.string());

    // world_axis[i] = which world axis index axis i runs along.
    const auto m = detail::orientation_matrix(h);
    std::array<int, 3> world_axis{};
    std::array<bool, 3> used{};
    for (int col = 0; col < 3; ++col) {
        const double len = std::sqrt(m[0][col] * m[0][col] + m[1][col] * m[1][col] + m[2][col] * m[2][col]);
        if (!(len > 0.0))
            throw FormatError("degenerate orientation matrix in " + path.string());
        int best = -1;
        for (int r = 0; r < 3; ++r) {
            const double c = std::abs(m[r][col]) / len;
            if (c > 1.0 - 1e-4)
                best = r;
            else if (c > 1e-4)
                throw FormatError("non-axis-aligned orientation is not supported: " + path.string());
        }
        if (best < 0 || used[best])
            throw FormatError("non-axis-aligned orientation is not supported: " + path.string());
        used[best] = true;
        world_axis[col] = best;
    }

    const Index3 src_dims{h.dim[1], h.dim[2], h.dim[3]};
    Index3 dims{};
    Vec3 spacing{};
    for (int i = 0; i < 3; ++i) {
        dims[world_axis[i]] = src_dims[i];
        const float s = std::abs(h.pixdim[i + 1]);
        spacing[world_axis[i]] = s > 0.0f ? s : 1.0;
    }
    if (world_axis == std::array<int, 3>{0, 1, 2})
        return Volume3D(dims, spacing, std::move(raw.data));

    Volume3D out(dims, spacing);
    for (int z = 0; z < src_dims[2]; ++z)
        for (int y = 0; y < src_dims[1]; ++y)
            for (int x = 0; x < src_dims[0]; ++x) {
                const int src[3] = {x, y, z};
                Index3 dst{};
                for (int i = 0; i < 3; ++i)
                    dst[world_axis[i]] = src[i];
                out(dst[0], dst[1], dst[2]) =
                    raw.data[std::size_t(x) + std::size_t(src_dims[0]) * (std::size_t(y) + std::size_t(src_dims[1]) * std::size_t(z))];
            }
    return out;
}

inline Header header_for(const Index3& dims, const Vec3& spacing, DataType dtype)
{
    Header h;
    h.dim = {3, std::int16_t(dims[0]), std::int16_t(dims[1]), std::int16_t(dims[2]), 1, 1, 1, 1};
    h.pixdim = {1.0f, float(spacing[0]), float(spacing[1]), float(spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
    h.datatype = dtype;
    h.sform_code = 1;
    for (int r = 0; r < 3; ++r)
        h.srow[r][r] = float(spacing[r]);
    return h;
}

inline void save_nifti(const Volume3D& vol, const std::filesystem::path& path, DataType dtype = DataType::Float32)
{
    for (int a = 0; a < 3; ++a)
        if (vol.dim(a) > 32767)
            throw FormatError("dimension exceeds NIfTI-1 limit");
    RawImage raw;
    raw.header = header_for(vol.dims(), vol.spacing(), dtype);
    raw.data.assign(vol.data().begin(), vol.data().end());
    write_raw(raw, path);
}

} // namespace reflecta::nifti
