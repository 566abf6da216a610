#pragma once

// On-disk forms of transforms:
//   affine        text, 12 numbers, rows of [linear | translation]
//   deformation   NIfTI-1, dims (X, Y, Z, 1, 3), intent DISPVECT, float32;
//                 i.e. the x, y and z displacement volumes back to back
//   symmetry      directory with symmetry.json, affine.txt and, for
//                 nonlinear transforms, field.nii.gz

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "reflecta/nifti.hpp"
#include "reflecta/transform.hpp"

namespace reflecta {

inline void save_affine(const AffineTransform& a, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write " + path.string());
    out << std::setprecision(17);
    for (int r = 0; r < 3; ++r)
        out << a.linear[r][0] << ' ' << a.linear[r][1] << ' ' << a.linear[r][2] << ' ' << a.translation[r] << '\n';
    if (!out)
        throw IoError("short write to " + path.string());
}

inline AffineTransform load_affine(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw IoError("file not found: " + path.string());
    AffineTransform a;
    for (int r = 0; r < 3; ++r)
        if (!(in >> a.linear[r][0] >> a.linear[r][1] >> a.linear[r][2] >> a.translation[r]))
            throw FormatError("affine file needs 12 numbers: " + path.string());
    std::string extra;
    if (in >> extra)
        throw FormatError("trailing content in affine file: " + path.string());
    if (!a.is_finite())
        throw FormatError("non-finite affine entry in " + path.string());
    return a;
}

inline void save_field(const DeformationField& f, const std::filesystem::path& path)
{
    const auto& d = f.dims();
    nifti::RawImage raw;
    raw.header = nifti::header_for(d, {1.0, 1.0, 1.0}, nifti::DataType::Float32);
    raw.header.dim = {5, std::int16_t(d[0]), std::int16_t(d[1]), std::int16_t(d[2]), 1, 3, 1, 1};
    raw.header.intent_code = nifti::kIntentDisplacementVector;
    for (int a = 0; a < 3; ++a)
        raw.data.insert(raw.data.end(), f.component(a).data().begin(), f.component(a).data().end());
    nifti::write_raw(raw, path);
}

inline DeformationField load_field(const std::filesystem::path& path)
{
    nifti::RawImage raw = nifti::read_raw(path);
    const auto& h = raw.header;
    if (h.dim[0] != 5 || h.dim[4] != 1 || h.dim[5] != 3)
        throw FormatError("deformation field must have dims (X,Y,Z,1,3): " + path.string());
    const Index3 d{h.dim[1], h.dim[2], h.dim[3]};
    const std::size_t n = std::size_t(d[0]) * std::size_t(d[1]) * std::size_t(d[2]);
    std::array<Volume3D, 3> comp;
    for (int a = 0; a < 3; ++a)
        comp[a] = Volume3D(d, {1.0, 1.0, 1.0},
                           std::vector<float>(raw.data.begin() + std::ptrdiff_t(a * n),
                                              raw.data.begin() + std::ptrdiff_t((a + 1) * n)));
    return {std::move(comp[0]), std::move(comp[1]), std::move(comp[2])};
}

inline void save_symmetry(const SymmetryTransform& t, const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nlohmann::json meta{{"axis", t.axis}, {"extent", t.extent}, {"nonlinear", t.field.has_value()}};
    std::ofstream out(dir / "symmetry.json");
    if (!out)
        throw IoError("cannot write " + (dir / "symmetry.json").string());
    out << meta.dump(2) << '\n';
    save_affine(t.correction, dir / "affine.txt");
    if (t.field)
        save_field(*t.field, dir / "field.nii.gz");
}

inline SymmetryTransform load_symmetry(const std::filesystem::path& dir)
{
    const auto meta_path = dir / "symmetry.json";
    std::ifstream in(meta_path);
    if (!in)
        throw IoError("file not found: " + meta_path.string());
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed " + meta_path.string() + ": " + e.what());
    }
    SymmetryTransform t;
    t.axis = meta.value("axis", 0);
    t.extent = meta.at("extent").get<int>();
    t.correction = load_affine(dir / "affine.txt");
    if (meta.value("nonlinear", false))
        t.field = load_field(dir / "field.nii.gz");
    return t;
}

} // namespace reflecta
