//! PGM/PBM snapshots and per-frame metrics.

use super::{BeliefGrid, Mask};

/// 8-bit binary PGM, gray = round(255 P).
pub fn pgm_bytes(grid: &BeliefGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(
        grid.probabilities()
            .iter()
            .map(|p| (255.0 * p).round() as u8),
    );
    out
}

/// Binary PBM; inbody cells are black (bit set).
pub fn pbm_bytes(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    for row in mask.cells.chunks(mask.width) {
        for byte in row.chunks(8) {
            let mut b = 0u8;
            for (i, &on) in byte.iter().enumerate() {
                if on {
                    b |= 0x80 >> i;
                }
            }
            out.push(b);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub mean_inbody_p: f64,
    pub mean_outbody_p: f64,
}

impl FrameMetrics {
    pub fn measure(frame: usize, grid: &BeliefGrid, inbody: &[bool]) -> FrameMetrics {
        let (mut s_in, mut n_in, mut s_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (p, &b) in grid.probabilities().iter().zip(inbody) {
            if b {
                s_in += p;
                n_in += 1;
            } else {
                s_out += p;
                n_out += 1;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        FrameMetrics {
            frame,
            mean_inbody_p: mean(s_in, n_in),
            mean_outbody_p: mean(s_out, n_out),
        }
    }
}

pub fn metrics_csv(rows: &[FrameMetrics]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "mean_inbody_P", "mean_outbody_P"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.frame.to_string(),
            r.mean_inbody_p.to_string(),
            r.mean_outbody_p.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_levels() {
        let g = BeliefGrid::from_log_odds(3, 1, 1, vec![-6.0, 0.0, 6.0]).unwrap();
        let bytes = pgm_bytes(&g);
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[1, 128, 254]);
    }

    #[test]
    fn pbm_packs_rows_msb_first() {
        let mut cells = vec![false; 10 * 2];
        cells[0] = true;
        cells[9] = true;
        cells[10 + 7] = true;
        let bytes = pbm_bytes(&Mask {
            width: 10,
            height: 2,
            cells,
        });
        let header = b"P4\n10 2\n";
        assert_eq!(&bytes[header.len()..], &[0x80, 0x40, 0x01, 0x00]);
    }

    #[test]
    fn metrics_split_by_label() {
        let g = BeliefGrid::from_log_odds(2, 1, 1, vec![6.0, -6.0]).unwrap();
        let m = FrameMetrics::measure(4, &g, &[true, false]);
        assert!(m.mean_inbody_p > 0.99 && m.mean_outbody_p < 0.01);
        let text = metrics_csv(&[m]);
        assert!(text.starts_with("frame,mean_inbody_P,mean_outbody_P\n4,"));
    }
}
