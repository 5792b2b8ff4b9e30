//! Inspection images: 16-bit PGM depth and 8-bit PPM normals.

use std::io::Write;

use super::GeoMaps;

/// Foreground depth mapped linearly onto `1..=65535` between the nearest
/// and farthest foreground pixel; background is 0.
pub fn write_depth_pgm(maps: &GeoMaps, out: &mut impl Write) -> std::io::Result<()> {
    let fg = maps.depth.iter().filter(|d| d.is_finite());
    let lo = fg.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = fg.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = (hi - lo).max(1e-12);
    write!(out, "P5\n{} {}\n65535\n", maps.res, maps.res)?;
    for &d in &maps.depth {
        let v: u16 = if d.is_finite() { 1 + (((d - lo) / span) * 65534.0).round() as u16 } else { 0 };
        out.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Normals mapped from `[-1, 1]` to `[0, 255]` per channel.
pub fn write_normal_ppm(maps: &GeoMaps, out: &mut impl Write) -> std::io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", maps.res, maps.res)?;
    for n in &maps.normal {
        let px = n.map(|c| ((c.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
        out.write_all(&px)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_and_sizes() {
        let maps = GeoMaps { res: 2, radius: 2.0, depth: vec![1.0, 2.0, f64::INFINITY, 1.5], normal: vec![[0.0, 0.0, -1.0]; 4] };
        let mut pgm = Vec::new();
        write_depth_pgm(&maps, &mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n65535\n"));
        assert_eq!(pgm.len(), 13 + 8);
        assert_eq!(&pgm[13..15], &1u16.to_be_bytes());
        assert_eq!(&pgm[17..19], &0u16.to_be_bytes());
        let mut ppm = Vec::new();
        write_normal_ppm(&maps, &mut ppm).unwrap();
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(&ppm[11..14], &[128, 128, 0]);
    }
}
