//! Minimal f64 3-vector / 3x3-matrix helpers used by cameras, kinematics and
//! the synthetic renderer. Row-major, right-handed, y up.

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn v3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn add(self, o: Vec3) -> Vec3 {
        v3(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        v3(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, k: f64) -> Vec3 {
        v3(self.x * k, self.y * k, self.z * k)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        v3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        debug_assert!(n > 0.0, "normalizing a zero vector");
        self.scale(1.0 / n)
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub m: [f64; 9],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    };

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Mat3 {
        Mat3 {
            m: [r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z],
        }
    }

    pub fn row(&self, i: usize) -> Vec3 {
        v3(self.m[i * 3], self.m[i * 3 + 1], self.m[i * 3 + 2])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        v3(self.m[j], self.m[3 + j], self.m[6 + j])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        v3(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut m = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] = self.row(i).dot(o.col(j));
            }
        }
        Mat3 { m }
    }

    pub fn transpose(&self) -> Mat3 {
        Mat3::from_rows(self.col(0), self.col(1), self.col(2))
    }

    pub fn det(&self) -> f64 {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    /// Max absolute deviation of `R^T R` from the identity.
    pub fn orthonormal_error(&self) -> f64 {
        let rtr = self.transpose().mul(self);
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr.m[i * 3 + j] - want).abs());
            }
        }
        worst
    }

    pub fn rot_x(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3 {
            m: [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c],
        }
    }

    pub fn rot_y(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3 {
            m: [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c],
        }
    }

    pub fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3 {
            m: [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Z-Y-X composed rotation from per-axis angles (radians).
    pub fn from_euler(rx: f64, ry: f64, rz: f64) -> Mat3 {
        Mat3::rot_z(rz).mul(&Mat3::rot_y(ry)).mul(&Mat3::rot_x(rx))
    }
}
