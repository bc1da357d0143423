use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Ground-truth box: class plus center/size as fractions of the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxAnnotation {
    pub fn new(class_id: usize, cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BoxAnnotation {
            class_id,
            cx,
            cy,
            w,
            h,
        }
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.cx as f64, self.cy as f64, self.w as f64, self.h as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::data(format!(
                "box size {}x{} outside (0,1]",
                self.w, self.h
            )));
        }
        if !unit(self.cx) || !unit(self.cy) {
            return Err(Error::data(format!(
                "box center ({}, {}) outside [0,1]",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// `<class_id> <cx> <cy> <w> <h>`; floats use the shortest exact
    /// representation so parsing the line gives back identical values.
    pub fn to_line(&self) -> String {
        format!("{} {} {} {} {}", self.class_id, self.cx, self.cy, self.w, self.h)
    }
}

/// Parses one label line `<class_id> <cx> <cy> <w> <h>`. Values are not
/// clamped; anything outside the valid ranges is a data error.
pub fn parse_annotation_line(text: &str, line_no: usize) -> Result<BoxAnnotation> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::data(format!(
            "line {line_no}: expected 5 fields, found {}",
            fields.len()
        )));
    }
    let class_id = fields[0].parse::<usize>().map_err(|_| {
        Error::data(format!("line {line_no}: bad class id `{}`", fields[0]))
    })?;
    let mut vals = [0f32; 4];
    for (v, f) in vals.iter_mut().zip(&fields[1..]) {
        *v = f
            .parse::<f32>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::data(format!("line {line_no}: `{f}` is not a number")))?;
    }
    let b = BoxAnnotation::new(class_id, vals[0], vals[1], vals[2], vals[3]);
    b.validate()
        .map_err(|e| Error::data(format!("line {line_no}: {}", e.to_string().trim_start_matches("data error: "))))?;
    Ok(b)
}

/// Parses a whole label file; blank lines are skipped.
pub fn parse_label_text(text: &str) -> Result<Vec<BoxAnnotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_annotation_line(l, i + 1))
        .collect()
}
